"""
网络模型测试 - 预设、参数统计、压缩率与前向计算
"""
import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from models.network import (
    ModelSpec,
    build_model,
    compression_ratio,
    count_parameters,
    format_parameters,
    forward,
    parameter_names,
    parameter_shapes,
    predict_proba,
    preset_spec,
    sgd_update
)
from utils import tensor as T
from utils.errors import ConfigError, ParameterError, ShapeError
from utils.rng import derive_rng


def _model(kind, preset='desk', k=6, **overrides):
    spec = preset_spec(preset, kind, num_features=k, **overrides)
    return build_model(spec, derive_rng(0, 'init'), derive_rng(0, 'dropout'))


# ==================== 参数统计 ====================

@pytest.mark.parametrize('kind,expected', [
    ('teacher', 246387),
    ('student_tx', 84642),
    ('student_mlp', 4450)
])
def test_desk_parameter_counts(kind, expected):
    spec = preset_spec('desk', kind)
    assert count_parameters(spec) == expected
    assert sum(r * c for r, c in parameter_shapes(spec).values()) == expected
    assert parameter_names(spec) == list(parameter_shapes(spec))
    assert parameter_names(spec)[0] == ('mlp.fc0.weight' if kind == 'student_mlp' else 'embed.weight')


@pytest.mark.parametrize('kind,expected', [
    ('teacher', 18310175),
    ('student_tx', 6105162),
    ('student_mlp', 693506)
])
def test_paper_scale_parameter_counts(kind, expected):
    assert count_parameters(preset_spec('paper-scale', kind)) == expected


@pytest.mark.parametrize('kind', ['teacher', 'student_tx', 'student_mlp'])
def test_closed_form_matches_built_model(kind):
    model = _model(kind, k=7)
    assert model.num_parameters() == count_parameters(model.spec)


def _random_spec(seed):
    rng = derive_rng(seed, 'spec')
    kind = ('teacher', 'student_tx', 'student_mlp')[int(rng.integers(3))]
    heads_1, heads_2 = (int(h) for h in rng.integers(1, 4, size=2))
    return ModelSpec(
        kind=kind,
        num_features=int(rng.integers(1, 9)),
        d_model_1=heads_1 * int(rng.integers(1, 5)),
        heads_1=heads_1,
        encoder_layers_1=int(rng.integers(1, 3)),
        dropout_1=float(rng.uniform(0.0, 0.5)),
        d_model_2=heads_2 * int(rng.integers(1, 5)),
        heads_2=heads_2,
        encoder_layers_2=int(rng.integers(1, 3)),
        mlp_widths=[int(w) for w in rng.integers(1, 9, size=int(rng.integers(0, 3)))],
        num_classes=int(rng.integers(2, 5))
    ).validate()


@pytest.mark.parametrize('seed', range(50))
def test_closed_form_matches_random_specs(seed):
    spec = _random_spec(seed)
    model = build_model(spec, derive_rng(seed, 'init'))
    assert count_parameters(spec) == model.num_parameters()
    logits = forward(model.eval(), derive_rng(seed, 'features').random((3, spec.num_features)))
    assert logits.shape == (3, spec.num_classes)


def test_model_size_ordering():
    for preset in ('desk', 'paper-scale'):
        counts = {kind: count_parameters(preset_spec(preset, kind))
                  for kind in ('teacher', 'student_tx', 'student_mlp')}
        assert counts['student_mlp'] < counts['student_tx'] < counts['teacher']


def test_compression_ratios():
    teacher, student_tx, student_mlp = 18142949, 8178842, 797925
    assert round(100 * compression_ratio(student_tx, teacher), 1) == 54.9
    assert round(100 * compression_ratio(student_mlp, teacher), 1) == 95.6
    assert compression_ratio(teacher, teacher) == 0.0
    with pytest.raises(ParameterError):
        compression_ratio(10, 0)


def test_format_parameters():
    assert format_parameters(18142949) == '18.14 M'
    assert format_parameters(4450) == '4.45 K'
    assert format_parameters(12) == '12'


# ==================== 结构校验 ====================

def test_indivisible_heads_rejected():
    with pytest.raises(ConfigError):
        preset_spec('desk', 'teacher', d_model_1=42)


def test_invalid_specs_rejected():
    with pytest.raises(ConfigError):
        ModelSpec(kind='student_cnn').validate()
    with pytest.raises(ConfigError):
        preset_spec('desk', 'student_tx', dropout_1=1.0)
    with pytest.raises(ConfigError):
        preset_spec('laptop', 'teacher')
    with pytest.raises(ConfigError):
        preset_spec('desk', 'student_mlp', num_classes=1)


def test_spec_dict_round_trip():
    spec = preset_spec('desk', 'teacher', num_features=9)
    assert ModelSpec.from_dict(spec.to_dict()) == spec


# ==================== 前向计算 ====================

@pytest.mark.parametrize('kind,classes', [('teacher', 3), ('student_tx', 2), ('student_mlp', 2)])
def test_forward_shapes(kind, classes):
    model = _model(kind, k=6).eval()
    features = derive_rng(1, 'features').integers(0, 2, size=(5, 6)).astype(float)
    logits = forward(model, features)
    assert logits.shape == (5, classes)
    assert np.all(np.isfinite(logits.value))


def test_forward_rejects_wrong_width():
    model = _model('student_tx', k=6)
    with pytest.raises(ShapeError):
        forward(model, np.zeros((2, 5)))


def test_eval_mode_is_deterministic():
    model = _model('teacher', k=6).eval()
    features = derive_rng(2, 'features').random((4, 6))
    assert_array_equal(forward(model, features).value, forward(model, features).value)


def test_train_mode_dropout_changes_output():
    model = _model('teacher', k=6).train()
    features = derive_rng(3, 'features').random((4, 6))
    assert not np.array_equal(forward(model, features).value, forward(model, features).value)


def test_samples_are_independent():
    """批次中其他样本不影响某个样本的输出"""
    model = _model('student_tx', k=6).eval()
    features = derive_rng(4, 'features').random((3, 6))
    batch = forward(model, features).value
    single = forward(model, features[1:2]).value
    assert_allclose(batch[1:2], single, rtol=1e-12, atol=1e-12)


def test_predict_proba_restores_mode():
    model = _model('student_mlp', k=6).train()
    proba = predict_proba(model, np.ones((2, 6)))
    assert model.training
    assert_allclose(proba.sum(axis=1), 1.0)


def test_same_seed_same_initialisation():
    a, b = _model('student_tx', k=5), _model('student_tx', k=5)
    for name in a.params:
        assert_array_equal(a.params[name].value, b.params[name].value)


def test_load_arrays_rejects_shape_mismatch():
    model = _model('student_mlp', k=6)
    arrays = model.state_arrays()
    arrays['mlp.out.bias'] = np.zeros((1, 3))
    with pytest.raises(ShapeError):
        model.load_arrays(arrays)


def test_sgd_update():
    assert_allclose(sgd_update([[1.0, 2.0]], [[0.5, -1.0]], 0.1), [[0.95, 2.1]])
    with pytest.raises(ShapeError):
        sgd_update([[1.0]], [[1.0, 2.0]], 0.1)
    with pytest.raises(ParameterError):
        sgd_update([[1.0]], [[1.0]], 0.0)


def test_sgd_update_examples():
    assert_allclose(sgd_update([[1.0]], [[2.0]], 0.1), [[0.8]])
    assert_array_equal(sgd_update([[3.0, -1.0]], [[0.0, 0.0]], 0.5), [[3.0, -1.0]])


def test_sgd_converges_on_quadratic_bowl():
    """f(w) = 2w²，步长低于曲率上界时单调下降"""
    w = np.array([[5.0]])
    losses = []
    for _ in range(50):
        losses.append(float(2.0 * w[0, 0] ** 2))
        w = sgd_update(w, 4.0 * w, 0.1)
    assert all(b < a for a, b in zip(losses, losses[1:]))
    assert losses[-1] < 1e-6


def test_every_teacher_parameter_receives_gradient():
    model = _model('teacher', k=6).eval()
    features = derive_rng(5, 'features').random((4, 6))
    T.backward(T.sum_all(T.mul(forward(model, features), T.constant([[1.0, -2.0, 0.5]]))))
    # 键偏置对 softmax 是平移，梯度恒为 0
    dead = [name for name, node in model.params.items()
            if not np.any(node.grad) and not name.endswith('.attn.b_k')]
    assert dead == []


def test_zero_output_head_gives_uniform_probabilities():
    model = _model('student_tx', k=6).eval()
    model.params['head.out.weight'].value[:] = 0.0
    model.params['head.out.bias'].value[:] = 0.0
    proba = predict_proba(model, derive_rng(6, 'features').random((3, 6)))
    assert_allclose(proba, 0.5)


def test_permuting_rows_permutes_logits():
    model = _model('teacher', k=6).eval()
    features = derive_rng(7, 'features').random((5, 6))
    order = np.array([3, 0, 4, 1, 2])
    assert_allclose(forward(model, features[order]).value, forward(model, features).value[order],
                    rtol=1e-12, atol=1e-12)
