import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tcpl.config import Thresholds
from tcpl.data import AugmentationPolicy, DomainDataset, ImageSample
from tcpl.interpret import (ExplanationTrace, activation_map, build_trace, high_activation_box, nearest_patch_preview,
                            project_prototypes, prototype_card, provenance_cosine, trace_from_arrays, upsample)
from tcpl.model import PrototypeNetwork, build_model
from tcpl.selftrain import refresh_pseudo_labels

from .conftest import tiny_config


def pixel_model(n_classes=2, per_class=1, pool_sizes=(1,)):
    """A network whose grid features are the raw RGB pixels (D=3)."""
    model = PrototypeNetwork(n_classes, per_class, feature_dim=3, pool_sizes=pool_sizes).double()
    model.backbone = torch.nn.Identity()
    return model


def _unit(*v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


def _source(pixel_rows, labels):
    samples = [ImageSample(np.asarray(px, dtype=np.float64).reshape(1, -1, 3), y, "source", f"s{i}")
               for i, (px, y) in enumerate(zip(pixel_rows, labels))]
    return DomainDataset(samples, [f"c{c}" for c in range(max(labels) + 1)], "source")


class TestProjection:
    def test_single_candidate(self):
        model = pixel_model()
        b = np.array([3.0, 4.0, 0.0])
        source = _source([[b], [[0, 0, 1.0]]], [0, 1])
        project_prototypes(model, source)
        np.testing.assert_allclose(model.prototypes[0].detach().numpy(), b / 5, atol=1e-15)
        assert provenance_cosine(model, 0) == pytest.approx(1.0, abs=1e-12)
        assert model.provenance[0]["sample_id"] == "s0"

    def test_best_of_three(self):
        model = pixel_model()
        with torch.no_grad():
            model.prototypes[0] = torch.tensor([1.0, 0, 0])
        scores = [0.2, 0.9, 0.5]
        # candidates of different lengths: only the direction may matter
        cands = [(2.0 + k) * _unit(s, math.sqrt(1 - s * s), 0) for k, s in enumerate(scores)]
        source = _source([cands, [[0, 0, 1.0]] * 3], [0, 1])
        # brute force: normalized score of every candidate against the prototype
        oracle = int(np.argmax([c @ np.array([1.0, 0, 0]) / np.linalg.norm(c) for c in cands]))
        project_prototypes(model, source)
        assert oracle == 1
        assert model.provenance[0]["col"] == 1
        assert model.provenance[0]["similarity"] == pytest.approx(0.9, abs=1e-12)

    def test_no_candidates_keeps_prototype(self):
        model = pixel_model(n_classes=3)
        before = model.prototypes[2].detach().clone()
        source = _source([[[1.0, 0, 0]], [[0, 1.0, 0]]], [0, 1])
        assert project_prototypes(model, source) == [0, 1]
        assert torch.equal(model.prototypes[2], before) and model.provenance[2] is None

    def _target_setup(self, eta):
        model = pixel_model()
        with torch.no_grad():
            model.prototypes.copy_(torch.tensor([[1.0, 0, 0], [0, 1.0, 0]]))
            model.head.copy_(torch.tensor([[1.0, -0.5], [-0.5, 1.0]]) * 20)
        source = _source([[_unit(0.3, 0, 1)], [_unit(0.05, 1, 0.9)]], [0, 1])
        target = DomainDataset([ImageSample(np.array([[[1.0, 0.01, 0]]]), None, "target", "t0"),
                                ImageSample(np.array([[[0.01, 1.0, 0]]]), None, "target", "t1")],
                               ["c0", "c1"], "target")
        plt = refresh_pseudo_labels(target, model, AugmentationPolicy(1, [{"op": "identity"}], 0),
                                    Thresholds(0.5, 1))
        assert len(plt) == 2
        project_prototypes(model, source, plt, target, eta=eta)
        return model

    def test_target_patch_can_win(self):
        model = self._target_setup(eta=1.0)
        assert {p["domain"] for p in model.provenance} == {"target"}

    def test_eta_zero_keeps_source(self):
        model = self._target_setup(eta=0.0)
        assert {p["domain"] for p in model.provenance} == {"source"}

    def test_trained_model_contract(self, pair):
        source, target = pair
        from tcpl.trainer import fit
        state = fit(tiny_config(epochs=2, epoch_update_proto=1), source, target)
        model = state.model
        assert all(p is not None for p in model.provenance)
        norms = model.prototypes.detach().norm(dim=1)
        assert (norms - 1).abs().max() < 1e-6
        for j in range(model.n_prototypes):
            assert abs(provenance_cosine(model, j) - 1) < 1e-6
            assert source.get(model.provenance[j]["sample_id"]).label == model.class_of(j) \
                if model.provenance[j]["domain"] == "source" else True

    def test_improves_similarity_to_winner(self, pair, rng):
        source, _ = pair
        model = build_model(tiny_config(dtype="float64"), 3)
        before = model.prototypes.detach().clone()
        project_prototypes(model, source)
        from tcpl.interpret import provenance_feature
        for j in range(model.n_prototypes):
            b = provenance_feature(model, j)
            old = torch.dot(b, before[j]) / b.norm()
            assert provenance_cosine(model, j) >= old.item() - 1e-12


class TestActivation:
    def test_bilinear_hand_example(self):
        up = upsample(np.array([[0.0, 0.0], [0.0, 1.0]]), (4, 4))
        r, c = np.unravel_index(np.argmax(up), up.shape)
        assert (r, c) == (3, 3)
        # pixel-center aligned weights: corner pixel sits at source coordinate 1.25 -> clamped to 1
        assert up[3, 3] == 1.0 and up[2, 2] == pytest.approx(0.75 * 0.75)

    def test_constant_map(self):
        up = upsample(np.full((3, 3), 2.5), (12, 12))
        np.testing.assert_allclose(up, 2.5, rtol=0, atol=1e-15)

    def test_locality(self, rng):
        raw = rng.uniform(size=(4, 4))
        up = upsample(raw, (32, 32))
        r, c = np.unravel_index(np.argmax(raw), raw.shape)
        R, C = np.unravel_index(np.argmax(up), up.shape)
        assert (R // 8, C // 8) == (r, c)

    def test_map_uses_argmax_level(self, rng):
        model = build_model(tiny_config(), 3).eval()
        img = rng.uniform(size=(32, 32, 3)).astype(np.float32)
        out = model(img)
        for j in range(model.n_prototypes):
            amap = activation_map(img, model, j)
            assert amap.source_level == out.argmax_grid(0)[j][0]
            assert amap.values.shape == (32, 32)
            assert amap.raw.max() == pytest.approx(out.f[0, j].item(), rel=1e-6)

    def test_invalid_index(self, rng):
        model = build_model(tiny_config(), 3)
        with pytest.raises(IndexError):
            activation_map(rng.uniform(size=(32, 32, 3)), model, 6)


class TestBox:
    def test_single_hot_pixel(self):
        # with 399 zeros the 95th percentile is 0 and every pixel qualifies, so
        # raise the percentile until only the hot pixel clears it
        m = np.zeros((20, 20))
        m[4, 7] = 1.0
        assert high_activation_box(m) == (0, 0, 19, 19)
        assert high_activation_box(m, percentile=99.9) == (4, 7, 4, 7)

    def test_constant_map_full_box(self):
        assert high_activation_box(np.ones((5, 6))) == (0, 0, 4, 5)

    def test_two_hot_corners(self):
        m = np.zeros((4, 4))
        m[0, 0] = m[3, 3] = 1.0
        assert high_activation_box(m, percentile=90) == (0, 0, 3, 3)

    def test_fraction_of_max_rule(self):
        m = np.array([[0.0, 0.96], [0.5, 1.0]])
        assert high_activation_box(m, 95, rule="fraction_of_max") == (0, 1, 1, 1)

    @settings(max_examples=100, deadline=None)
    @given(arrays(np.float64, st.tuples(st.integers(2, 12), st.integers(2, 12)), elements=st.floats(-5, 5)))
    def test_smallest_enclosing_rectangle(self, values):
        assert_smallest_enclosing(values)


def assert_smallest_enclosing(values, percentile=95.0):
    t = np.percentile(values, percentile)
    top, left, bottom, right = high_activation_box(values, percentile)
    hot = values >= t
    inside = np.zeros_like(hot)
    inside[top:bottom + 1, left:right + 1] = True
    assert hot.any() and not (hot & ~inside).any()
    # every side touches a hot pixel, so shrinking any side drops one
    assert hot[top, left:right + 1].any() and hot[bottom, left:right + 1].any()
    assert hot[top:bottom + 1, left].any() and hot[top:bottom + 1, right].any()


class TestTrace:
    def test_one_hot_init(self):
        W = np.array([[1, 1, -0.5, -0.5, -0.5, -0.5], [-0.5, -0.5, 1, 1, -0.5, -0.5],
                      [-0.5, -0.5, -0.5, -0.5, 1, 1]])
        f = np.zeros(6)
        f[3] = 1.0
        trace = trace_from_arrays("x", f, W)
        assert trace.predicted == 1
        nonzero = [e for e in trace.per_class[1] if e.contribution != 0]
        assert [(e.prototype_index, e.contribution) for e in nonzero] == [(3, 1.0)]

    def test_reconstruction_random(self, rng):
        for _ in range(100):
            f = rng.normal(size=6).astype(np.float32)
            W = rng.normal(size=(3, 6)).astype(np.float32)
            trace = trace_from_arrays("x", f, W)
            assert trace.reconstruction_error() == 0.0
            np.testing.assert_allclose(trace.logits, W.astype(np.float64) @ f.astype(np.float64), atol=1e-12)

    def test_completeness(self, rng):
        trace = trace_from_arrays("x", rng.normal(size=6), rng.normal(size=(3, 6)))
        for row in trace.per_class:
            assert sorted(e.prototype_index for e in row) == list(range(6))

    def test_json_round_trip_bit_exact(self, rng):
        model = build_model(tiny_config(), 3)
        img = rng.uniform(size=(32, 32, 3)).astype(np.float32)
        trace = build_trace(img, model, "q", ["a", "b", "c"])
        doc = json.loads(json.dumps(trace.to_json()))
        again = ExplanationTrace.from_json(doc)
        assert again == trace
        assert json.dumps(again.to_json()) == json.dumps(trace.to_json())

    def test_matches_model_logits(self, rng):
        model = build_model(tiny_config(), 3).eval()
        img = rng.uniform(size=(32, 32, 3)).astype(np.float32)
        trace = build_trace(img, model)
        logits = model(img).logits[0].detach().numpy()
        np.testing.assert_allclose(trace.logits, logits, atol=1e-6)
        assert trace.predicted == int(np.argmax(logits))

    def test_boxes_for_predicted_class(self, rng):
        model = build_model(tiny_config(), 3)
        trace = build_trace(rng.uniform(size=(32, 32, 3)), model)
        for e in trace.per_class[trace.predicted]:
            assert (e.box is not None) == e.own
        assert trace.top_evidence()[0].own


class TestCards:
    def test_unprojected_card(self):
        model = build_model(tiny_config(), 3)
        assert prototype_card(model, 0).status == "unprojected"

    def test_projected_card(self, pair):
        source, _ = pair
        model = build_model(tiny_config(), 3)
        project_prototypes(model, source)
        card = prototype_card(model, 2)
        assert card.cls == 1 and card.status == "projected"
        assert abs(card.cosine - 1) < 1e-6
        assert card.patch_image.ndim == 3

    def test_preview_matches_projection(self, pair):
        source, _ = pair
        model = build_model(tiny_config(dtype="float64"), 3)
        preview = nearest_patch_preview(model, 4, source)
        project_prototypes(model, source)
        assert preview["sample_id"] == model.provenance[4]["sample_id"]
        assert (preview["level"], preview["row"], preview["col"]) == \
            tuple(model.provenance[4][k] for k in ("level", "row", "col"))
