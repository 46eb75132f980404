import numpy as np
import pytest
import torch

from bidirte.corpus import Example, RelationVocab, SpanTriple, build_gold_tensors
from bidirte.encoder import TinyEncoder, WordVocab
from bidirte.model import BidirectionalTagger, ModelConfig

D, R = 8, 2


def make_model(config=None, seed=0):
    torch.manual_seed(seed)
    enc = TinyEncoder(WordVocab(["Tom", "was", "born", "in", "York"]), hidden_size=D, num_layers=1, num_heads=2,
                      max_len=10, dropout=0.0)
    return BidirectionalTagger(enc, R, config).double()


def npw(layer):
    return layer.weight.detach().numpy(), layer.bias.detach().numpy()


def affine(x, layer):
    w, b = npw(layer)
    return x @ w.T + b


def sigmoid(x):
    return 1 / (1 + np.exp(-x))


@pytest.fixture
def model():
    return make_model()


@pytest.fixture
def h():
    torch.manual_seed(1)
    return torch.randn(2, 5, D, dtype=torch.float64)


@pytest.fixture
def mask():
    return torch.tensor([[1, 1, 1, 0, 0], [1, 1, 1, 1, 1]], dtype=torch.bool)


def test_zero_weights_give_half(model, h, mask):
    with torch.no_grad():
        for p in model.parameters():
            p.zero_()
    ps, pe = model.tag_subjects(h, mask)
    assert torch.all(ps[mask] == 0.5) and torch.all(pe[mask] == 0.5)
    assert torch.all(model.predict_relations(h, mask) == 0.5)
    grid = model.tag_objects_given_subject(h, mask, [1], [(0, 1)], torch.zeros(2, R, dtype=torch.float64))
    assert torch.all(grid.start == 0.5) and torch.all(grid.end == 0.5)


def test_subject_tagger_matches_numpy(model, h, mask):
    ps, pe = model.tag_subjects(h, mask)
    feats = affine(h.numpy(), model.proj_sub)
    ref_s = sigmoid(affine(feats, model.sub_tagger.start))[..., 0] * mask.numpy()
    ref_e = sigmoid(affine(feats, model.sub_tagger.end))[..., 0] * mask.numpy()
    np.testing.assert_allclose(ps.detach().numpy(), ref_s, atol=1e-12)
    np.testing.assert_allclose(pe.detach().numpy(), ref_e, atol=1e-12)


def test_object_tagger_matches_numpy(model, h, mask):
    ps, _ = model.tag_objects(h, mask)
    ref = sigmoid(affine(affine(h.numpy(), model.proj_obj), model.obj_tagger.start))[..., 0] * mask.numpy()
    np.testing.assert_allclose(ps.detach().numpy(), ref, atol=1e-12)


def test_relation_head_matches_numpy(model, h, mask):
    p = model.predict_relations(h, mask).detach().numpy()
    feats = affine(h.numpy(), model.proj_rel)
    pooled = np.stack([feats[0, :3].mean(0), feats[1].mean(0)])
    np.testing.assert_allclose(p, sigmoid(affine(pooled, model.rel_head)), atol=1e-12)


def test_relation_head_single_token(model):
    x = torch.randn(1, 1, D, dtype=torch.float64)
    p = model.predict_relations(x, torch.ones(1, 1, dtype=torch.bool)).detach().numpy()
    np.testing.assert_allclose(p[0], sigmoid(affine(affine(x.numpy()[0, 0], model.proj_rel), model.rel_head)))


def test_relation_head_all_padding(model, h):
    with pytest.raises(ValueError):
        model.predict_relations(h, torch.zeros(2, 5, dtype=torch.bool))


def test_conditioned_grid_matches_numpy(model, h, mask):
    p_rel = torch.tensor([[0.2, 0.9], [0.7, 0.1]], dtype=torch.float64)
    grid = model.tag_objects_given_subject(h, mask, [1], [(1, 3)], p_rel)
    hb = h.numpy()[1]
    x = affine(hb, model.proj_obj) + hb[1:4].mean(0)
    fused = affine(np.concatenate([x, np.tile(p_rel.numpy()[1], (5, 1))], axis=1), model.fuse_obj)
    ref_start = sigmoid(affine(fused, model.rel_obj_tagger.start)).T
    ref_end = sigmoid(affine(fused, model.rel_obj_tagger.end)).T
    assert grid.start.shape == (1, R, 5)
    np.testing.assert_allclose(grid.start[0].detach().numpy(), ref_start, atol=1e-12)
    np.testing.assert_allclose(grid.end[0].detach().numpy(), ref_end, atol=1e-12)


def test_grid_padding_zero(model, h, mask):
    grid = model.tag_subjects_given_object(h, mask, [0], [(0, 0)], torch.rand(2, R, dtype=torch.float64))
    assert torch.all(grid.start[0, :, 3:] == 0) and torch.all(grid.end[0, :, 3:] == 0)
    assert torch.all((grid.start[0, :, :3] > 0) & (grid.start[0, :, :3] < 1))


def test_mirror_symmetry(model, h, mask):
    with torch.no_grad():
        for a, b in ((model.proj_sub, model.proj_obj), (model.fuse_sub, model.fuse_obj),
                     (model.rel_sub_tagger.start, model.rel_obj_tagger.start),
                     (model.rel_sub_tagger.end, model.rel_obj_tagger.end)):
            a.weight.copy_(b.weight)
            a.bias.copy_(b.bias)
    p_rel = torch.rand(2, R, dtype=torch.float64)
    s2o = model.tag_objects_given_subject(h, mask, [0, 1], [(0, 1), (2, 4)], p_rel)
    o2s = model.tag_subjects_given_object(h, mask, [0, 1], [(0, 1), (2, 4)], p_rel)
    torch.testing.assert_close(s2o.start, o2s.start)
    torch.testing.assert_close(s2o.end, o2s.end)


def test_conditioning_sensitivity(model, h, mask):
    p_rel = torch.rand(2, R, dtype=torch.float64)
    a = model.tag_objects_given_subject(h, mask, [1], [(0, 0)], p_rel)
    b = model.tag_objects_given_subject(h, mask, [1], [(3, 4)], p_rel)
    assert not torch.allclose(a.start, b.start)


def test_cross_direction_wiring(model, h, mask):
    p_rel = torch.rand(2, R, dtype=torch.float64)
    with torch.no_grad():
        model.proj_obj.weight.zero_()
    s2o = model.tag_objects_given_subject(h, mask, [1], [(0, 1)], p_rel).start[0]
    # with the object features flattened, every token sees the same input
    torch.testing.assert_close(s2o, s2o[:, :1].expand_as(s2o))
    o2s = model.tag_subjects_given_object(h, mask, [1], [(0, 1)], p_rel).start[0]
    assert not torch.allclose(o2s, o2s[:, :1].expand_as(o2s))


def test_empty_span_list(model, h, mask):
    grid = model.tag_objects_given_subject(h, mask, [], [], torch.rand(2, R, dtype=torch.float64))
    assert grid.start.shape == (0, R, 5)


class TestForwardTraining:
    def _gold(self):
        vocab = RelationVocab(["a", "b"])
        two = Example(tokens=["Tom", "was", "born", "in", "York"], token_offsets=[],
                      triples=[SpanTriple(0, 0, 0, 4, 4), SpanTriple(2, 2, 1, 4, 4)])
        none = Example(tokens=["Tom", "was"], token_offsets=[], triples=[])
        return [two, none], [build_gold_tensors(two, vocab), build_gold_tensors(none, vocab)]

    def test_grid_counts(self, model):
        examples, gold = self._gold()
        h, mask = model.encode([ex.tokens for ex in examples])
        out = model.forward_training(h, mask, gold)
        assert out.rel_obj.start.shape[0] == 2 and out.rel_obj.example == [0, 0]
        assert out.rel_sub.start.shape[0] == 1 and out.rel_sub.spans == [(4, 4)]
        assert out.p_rel.shape == (2, R)

    def test_replay(self, model):
        examples, gold = self._gold()
        model.eval()
        runs = []
        for _ in range(2):
            h, mask = model.encode([ex.tokens for ex in examples])
            runs.append(model.forward_training(h, mask, gold).rel_obj.start)
        assert torch.equal(*runs)

    def test_single_direction_omits_other(self):
        m = make_model(ModelConfig(o2s=False))
        examples, gold = self._gold()
        h, mask = m.encode([ex.tokens for ex in examples])
        out = m.forward_training(h, mask, gold)
        assert out.rel_sub is None and out.p_obj_start is None and out.rel_obj is not None

    def test_teacher_forcing_uses_gold_relations(self, model):
        _, gold = self._gold()
        rel = torch.tensor(np.stack([g.rel_labels for g in gold]))
        cond = model.relation_condition(torch.full((2, R), 0.3), rel, 2, torch.zeros(1, dtype=torch.float64))
        assert torch.equal(cond, rel.double())

    def test_relation_prediction_off_gives_zeros(self):
        m = make_model(ModelConfig(relation_prediction=False))
        cond = m.relation_condition(None, torch.ones(2, R), 2, torch.zeros(1))
        assert torch.all(cond == 0)


def test_both_directions_disabled():
    with pytest.raises(ValueError):
        ModelConfig(s2o=False, o2s=False)
