import numpy as np
import pytest
from oracles import layer_norm_rows

from ssmm import tensor as T
from ssmm.gradcheck import tiny_model
from ssmm.models import ModelConfig, MultimodalModel
from ssmm.nn import ConfigurationError
from ssmm.tensor import DimensionError, Tensor


@pytest.fixture
def model():
    return tiny_model(seed=0)


@pytest.fixture
def batch():
    rng = np.random.default_rng(0)
    return rng.normal(size=(3, 1, 6, 6, 6)), rng.normal(size=(3, 6))


def test_encoder_shapes(model, batch):
    vols, rows = batch
    assert model.encode_image(Tensor(vols)).shape == (3, 4)
    assert model.encode_tabular(Tensor(rows)).shape == (3, 4)
    z = model.project_image(model.encode_image(Tensor(vols)))
    assert model.interact(z, model.project_tabular(model.encode_tabular(Tensor(rows)))).shape == (3, 8)


def test_default_shapes():
    m = MultimodalModel(ModelConfig(tabular_in=10), seed=0)
    rng = np.random.default_rng(0)
    vols, rows = Tensor(rng.normal(size=(2, 1, 24, 24, 24))), Tensor(rng.normal(size=(2, 10)))
    feats = m.features(vols, rows)
    assert feats["image"].shape == (2, 128) and feats["tabular"].shape == (2, 128)
    assert feats["cls"].shape == (2, 256)


def test_wrong_input_shapes(model):
    with pytest.raises(DimensionError):
        model.encode_image(Tensor(np.zeros((2, 1, 5, 6, 6))))
    with pytest.raises(DimensionError):
        model.encode_tabular(Tensor(np.zeros((2, 7))))


def test_tabular_width_required():
    with pytest.raises(ConfigurationError):
        MultimodalModel(ModelConfig(tabular_in=0))


def test_duplicate_inputs_give_identical_rows(model):
    v = np.random.default_rng(1).normal(size=(1, 1, 6, 6, 6))
    out = model.encode_image(Tensor(np.concatenate([v, v]))).data
    assert out[0].tobytes() == out[1].tobytes()


def test_image_encoder_passes_gradient_to_input(model, batch):
    x = Tensor(batch[0], requires_grad=True)
    T.tsum(model.encode_image(x)).backward()
    assert np.abs(x.grad).max() > 0


def test_projection_unit_norm_and_zero_rule(model):
    z = model.project_image(Tensor(np.random.default_rng(2).normal(size=(5, 4)))).data
    np.testing.assert_allclose(np.linalg.norm(z, axis=1), 1.0, atol=1e-10)
    np.testing.assert_allclose((z @ z.T)[0, 1], np.dot(z[0], z[1]), atol=1e-15)
    head = model.image_projector
    for _, p in head.named_parameters():
        p.data[...] = 0.0
    np.testing.assert_array_equal(head(Tensor(np.ones((1, 4)))).data, 0.0)


def test_zero_interaction_gives_layer_normed_cls(model, batch):
    inter = model.interaction
    for name, p in inter.named_parameters():
        if name != "cls_token" and "norm" not in name:
            p.data[...] = 0.0
    rng = np.random.default_rng(3)
    out = inter(Tensor(rng.normal(size=(2, 4))), Tensor(rng.normal(size=(2, 4)))).data
    ref = inter.cls_token.data[0, 0]
    for _ in range(3):
        ref = layer_norm_rows(ref, 1.0, 0.0)
    np.testing.assert_allclose(out, np.tile(ref, (2, 1)), atol=1e-10)


def test_classifier_zero_weights_give_bias_and_grads_reach_all_sources(model, batch):
    vols, rows = batch
    clf = model.attach_classifier(("image", "tabular", "cls"))
    assert clf.in_dim == 4 + 4 + 8
    clf.fc.weight.data[...] = 0.0
    clf.fc.bias.data[...] = 0.7
    np.testing.assert_allclose(model.classify(Tensor(vols), Tensor(rows)).data, 0.7)

    clf.fc.weight.data[...] = 1.0
    feats = {k: Tensor(v.data, requires_grad=True) for k, v in model.features(Tensor(vols), Tensor(rows)).items()}
    T.tsum(clf(feats)).backward()
    assert all(np.abs(f.grad).max() > 0 for f in feats.values())


def test_unknown_classifier_source(model):
    with pytest.raises(ConfigurationError):
        model.attach_classifier(("image", "text"))


def test_classify_needs_head(model, batch):
    with pytest.raises(RuntimeError):
        model.classify(Tensor(batch[0]), Tensor(batch[1]))


def test_seeded_construction_is_deterministic():
    a, b = tiny_model(seed=4), tiny_model(seed=4)
    for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb and pa.data.tobytes() == pb.data.tobytes()
