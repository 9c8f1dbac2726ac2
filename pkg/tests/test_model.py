import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ctrlfl.errors import ConfigError, DivergenceWarning, InputError
from ctrlfl.model import (
    BOS, EOS, PAD, ControllerSpec, Mode, ModelConfig, Scope, build_model, designate_controllers,
    forward, greedy_decode, greedy_decode_batch, insert_controllers, load_checkpoint,
    partition_params, save_checkpoint, shared_subset, trainable_subset,
)
from ctrlfl.tensor_core import AdamState, Partition, count_params
from ctrlfl.training import BatchSampler, train_steps

TINY = ModelConfig(vocab_size=64, enc_layers=2, dec_layers=2, d_model=16, heads=2, d_ff=32, max_seq_len=16)


def enumerated_count(d, ff, V, n_enc, n_dec):
    # list every tensor by hand: (rows, cols) or (len,)
    attn = [(d, d), (d,)] * 4
    norm = [(d,), (d,)]
    ffn = [(d, ff), (ff,), (ff, d), (d,)]
    enc = norm + attn + norm + ffn
    dec = norm + attn + norm + attn + norm + ffn
    final = [(d,), (d,)] * 2
    shapes = [(V, d)] + enc * n_enc + dec * n_dec + final
    return sum(int(np.prod(s)) for s in shapes)


def test_param_count_oracle():
    m = build_model(TINY, 0)
    assert count_params(m.params) == enumerated_count(16, 32, 64, 2, 2)
    assert count_params(m.params) == sum(t.size for _, t in m.params.items())


def test_base_model_has_no_controllers():
    m = build_model(TINY, 0)
    assert count_params(m.params.with_labels(Partition.CONTROLLER)) == 0
    assert len(partition_params(m, Scope.CONTROLLERS)) == 0


def test_build_determinism():
    assert build_model(TINY, 3).params.checksums() == build_model(TINY, 3).params.checksums()
    assert build_model(TINY, 3).params.checksums() != build_model(TINY, 4).params.checksums()


@pytest.mark.parametrize("kw", [dict(heads=3), dict(d_model=0), dict(vocab_size=-1), dict(enc_layers=0)])
def test_invalid_config(kw):
    base = dict(vocab_size=64, enc_layers=2, dec_layers=2, d_model=16, heads=2, d_ff=32)
    with pytest.raises(ConfigError):
        build_model(ModelConfig(**{**base, **kw}), 0)


def six_layer(seed=0):
    return build_model(ModelConfig(vocab_size=40, enc_layers=6, dec_layers=6, d_model=16, heads=2,
                                   d_ff=32, max_seq_len=16), seed)


def insert_spec(pos=(2, 6), share=Scope.ALL, train=Scope.ALL):
    return ControllerSpec(Mode.INSERT, pos, pos, share, train)


def test_insert_at_2_6():
    base = six_layer()
    m = insert_controllers(base, insert_spec())
    assert m.n_enc == 8 and m.n_dec == 8
    assert [i for i, f in enumerate(m.enc_controllers) if f] == [2, 6]
    assert [i for i, f in enumerate(m.dec_controllers) if f] == [2, 6]
    # old layers keep weights bitwise, renumbered around the new ones
    old_of_new = [0, 1, None, 2, 3, 4, None, 5]
    for stack in ("enc", "dec"):
        for new, old in enumerate(old_of_new):
            for name in m.layer_names(stack, new):
                label = m.params.label(name)
                if old is None:
                    assert label is Partition.CONTROLLER
                    continue
                assert label is Partition.BASE
                src = name.replace(f"{stack}.{new}.", f"{stack}.{old}.", 1)
                assert np.array_equal(m.params[name].data, base.params[src].data)
    assert np.array_equal(m.params["embed.weight"].data, base.params["embed.weight"].data)


def test_controller_shapes_match_base_layers():
    m = insert_controllers(six_layer(), insert_spec())
    for stack in ("enc", "dec"):
        ctrl = {n.split(".", 2)[2]: m.params[n].shape for n in m.layer_names(stack, 2)}
        base = {n.split(".", 2)[2]: m.params[n].shape for n in m.layer_names(stack, 1)}
        assert ctrl == base


def probe_batch(V=40, B=4, T=6, seed=1):
    rng = np.random.default_rng(seed)
    src = rng.integers(4, V, size=(B, T))
    tgt = np.concatenate([np.full((B, 1), BOS), rng.integers(4, V, size=(B, T - 1))], axis=1)
    return src, tgt


def test_near_identity_insertion():
    base = six_layer()
    m = insert_controllers(base, insert_spec())
    src, tgt = probe_batch()
    delta = np.abs(forward(m, src, tgt).data - forward(base, src, tgt).data).max()
    assert delta < 1e-3
    sources = [list(r) + [EOS] for r in src]
    assert greedy_decode_batch(m, sources, 10) == greedy_decode_batch(base, sources, 10)


def test_insertion_errors():
    base = six_layer()
    with pytest.raises(ConfigError):
        insert_controllers(base, insert_spec((2, 2)))
    with pytest.raises(ConfigError):
        insert_controllers(base, insert_spec((2, 8)))
    with pytest.raises(ConfigError):
        insert_controllers(base, ControllerSpec(Mode.DESIGNATE, (1,), (1,)))


def test_position_zero_warns():
    with pytest.warns(DivergenceWarning):
        m = insert_controllers(six_layer(), insert_spec((0, 6)))
    assert m.warnings and "never" in m.warnings[0]


def designate(model, pos):
    return designate_controllers(model, ControllerSpec(Mode.DESIGNATE, pos, pos, Scope.CONTROLLERS,
                                                       Scope.CONTROLLERS))


def test_designate_0_3():
    base = six_layer()
    m = designate(base, (0, 3))
    assert m.n_enc == 6 and m.enc_controllers == [True, False, False, True, False, False]
    assert m.params.checksums() == base.params.checksums()
    ctrl = set(partition_params(m, Scope.CONTROLLERS).names())
    expected = {n for s in ("enc", "dec") for i in (0, 3) for n in m.layer_names(s, i)}
    assert ctrl == expected


def test_designate_involution_and_saturation():
    base = six_layer()
    labels = {n: base.params.label(n) for n in base.params}
    back = designate_controllers(designate(base, (0, 3)), ControllerSpec(Mode.DESIGNATE, (), ()))
    assert {n: back.params.label(n) for n in back.params} == labels
    full = designate(base, tuple(range(6)))
    non_embedding = {n for n in base.params if base.params.label(n) is not Partition.EMBEDDING}
    # final norms sit outside the stacks and stay Base
    layer_names = {n for n in non_embedding if n.startswith(("enc.", "dec."))}
    assert set(partition_params(full, Scope.CONTROLLERS).names()) == layer_names
    with pytest.raises(ConfigError):
        designate(base, (6,))


def test_partition_set_algebra():
    m = insert_controllers(six_layer(), insert_spec(share=Scope.CONTROLLERS, train=Scope.CONTROLLERS))
    every = set(partition_params(m, Scope.ALL).names())
    ctrl = set(partition_params(m, Scope.CONTROLLERS).names())
    base = set(m.params.with_labels(Partition.BASE).names())
    assert ctrl <= every and not (ctrl & base)
    assert every - ctrl == base
    assert set(partition_params(m, Scope.ALL, True).names()) - every == {"embed.weight"}
    assert set(partition_params(m, Scope.CONTROLLERS, True).names()) == ctrl | {"embed.weight"}
    # 2+2 controllers, no embeddings: exactly two encoder and two decoder layer groups
    groups = {tuple(n.split(".")[:2]) for n in ctrl}
    assert groups == {("enc", "2"), ("enc", "6"), ("dec", "2"), ("dec", "6")}
    assert shared_subset(m).names() == trainable_subset(m).names() == partition_params(m, "controllers").names()


def test_embedding_flags():
    s = ControllerSpec(Mode.INSERT, (2,), (2,), Scope.ALL, Scope.CONTROLLERS)
    assert not s.embeddings_trained and not s.embeddings_shared
    s = ControllerSpec(Mode.INSERT, (2,), (2,), Scope.ALL, Scope.ALL)
    assert s.embeddings_trained and s.embeddings_shared
    s = ControllerSpec(Mode.INSERT, (2,), (2,), Scope.CONTROLLERS, Scope.ALL)
    assert s.embeddings_trained and not s.embeddings_shared
    with pytest.raises(ConfigError):
        ControllerSpec(Mode.DESIGNATE, (), (), Scope.CONTROLLERS, Scope.ALL)


def test_forward_shapes_and_errors():
    m = build_model(TINY, 0)
    out = forward(m, [5], [BOS])
    assert out.shape == (1, 64) and np.isfinite(out.data).all()
    with pytest.raises(InputError):
        forward(m, list(range(4, 21)), [BOS])
    with pytest.raises(InputError):
        forward(m, [], [BOS])


@settings(max_examples=8, deadline=None)
@given(st.integers(1, 8), st.integers(0, 10_000))
def test_causal_masking(T, seed):
    m = build_model(TINY, 0)
    rng = np.random.default_rng(seed)
    src = rng.integers(4, 64, size=5)
    tgt = rng.integers(4, 64, size=T)
    ref = forward(m, src, tgt).data
    for j in range(T):
        changed = tgt.copy()
        changed[j] = 4 + (changed[j] - 3) % 60
        out = forward(m, src, changed).data
        # positions before j never see tgt[j]
        np.testing.assert_array_equal(out[:j], ref[:j])


def test_pad_masking():
    m = build_model(TINY, 0)
    src = np.array([[7, 8, 9, PAD, PAD]])
    tgt = np.array([[BOS, 5, 6]])
    ref = forward(m, src, tgt).data
    short = forward(m, src[:, :3], tgt).data
    np.testing.assert_allclose(ref, short, atol=1e-12)
    # padded target positions do not influence earlier ones
    padded = forward(m, src, np.array([[BOS, 5, 6, PAD, PAD]])).data
    np.testing.assert_allclose(padded[:, :3], ref, atol=1e-12)


def test_greedy_decode_contracts():
    m = build_model(TINY, 0)
    assert greedy_decode(m, [5, 6, EOS], 0) == []
    a, b = greedy_decode(m, [5, 6, EOS], 8), greedy_decode(build_model(TINY, 0), [5, 6, EOS], 8)
    assert a == b and len(a) <= 8
    assert all(t not in (BOS, EOS, PAD) for t in a)


def test_checkpoint_round_trip(tmp_path):
    m = insert_controllers(six_layer(), insert_spec(share=Scope.CONTROLLERS, train=Scope.CONTROLLERS))
    path = tmp_path / "m.ckpt"
    blob = save_checkpoint(m, path, {"note": "x"})
    back = load_checkpoint(path)
    assert back.config == m.config and back.spec == m.spec
    assert back.enc_controllers == m.enc_controllers
    assert back.params.checksums() == m.params.checksums()
    assert {n: back.params.label(n) for n in back.params} == {n: m.params.label(n) for n in m.params}
    assert save_checkpoint(back, tmp_path / "again.ckpt", {"note": "x"}) == blob


def test_overfit_copy_task():
    cfg = ModelConfig(vocab_size=24, enc_layers=2, dec_layers=2, d_model=32, heads=4, d_ff=64, max_seq_len=16)
    rng = np.random.default_rng(0)
    pairs = [(s, s) for s in (list(rng.integers(4, 24, size=rng.integers(3, 6))) for _ in range(8))]
    pairs = [([int(x) for x in s], [int(x) for x in t]) for s, t in pairs]
    m = build_model(cfg, 0)
    train_steps(m, AdamState(learning_rate=3e-3), BatchSampler(pairs, 8, 0), 200)
    for s, t in pairs:
        assert greedy_decode(m, s + [EOS], 10) == t
