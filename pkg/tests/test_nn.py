"""Neural blocks: attention stage vs a brute-force oracle, head expansion,
snapshot isolation, dropout behavior, init scheme, serialization."""

import math

import numpy as np
import pytest

from everlearn import tensor as T
from everlearn.errors import DimensionError, FormatError, ParameterError
from everlearn.nn import (ArchConfig, DenseLayer, DropoutLayer, ForwardOutput,
                          IncrementalModel, SelfAttentionStage, VarianceHead,
                          attention_map, expand_heads, init_parameters,
                          load_model, read_tensors, save_model, snapshot,
                          write_tensors)
from everlearn.rng import Rng
from everlearn.tensor import Tensor

TINY = ArchConfig(in_channels=1, widths=(2, 3, 4), attn_reduction=2, dropout=0.1)


def make_model(n_old, n_new, seed=0, arch=TINY):
    m = IncrementalModel(arch, n_old, n_new)
    init_parameters(m, Rng(seed))
    return m


def brute_force_attention(x, stage):
    """Double-loop spatial attention oracle in plain Python floats."""
    n, c, h, w = x.shape
    p = h * w
    inner = stage.inner
    qw = stage.query.data.reshape(inner, c)
    kw = stage.key.data.reshape(inner, c)
    vw = stage.value.data.reshape(inner, c)
    pw = stage.proj.data.reshape(c, inner)
    out = np.zeros((n, c, p))
    for b in range(n):
        cols = x[b].reshape(c, p)
        q = [qw @ cols[:, j] for j in range(p)]
        k = [kw @ cols[:, j] for j in range(p)]
        v = [vw @ cols[:, j] for j in range(p)]
        for i in range(p):
            energy = [float(np.dot(q[i], k[j])) / math.sqrt(inner) for j in range(p)]
            mx = max(energy)
            ws = [math.exp(e - mx) for e in energy]
            z = sum(ws)
            attended = sum((ws[j] / z) * v[j] for j in range(p))
            out[b, :, i] = pw @ attended
    return out.reshape(n, c, h, w)


class TestAttentionStage:
    def test_single_position_is_value_projection(self):
        stage = SelfAttentionStage(4, reduction=2)
        rng = Rng(3)
        for t in (stage.query, stage.key, stage.value, stage.proj):
            t.data = rng.normal(t.shape)
        x = Tensor(rng.normal((2, 4, 1, 1)))
        got = attention_map(stage, x)
        want = T.conv2d(T.conv2d(x, stage.value), stage.proj)
        assert np.allclose(got.data, want.data, atol=1e-14)

    def test_beta_rows_sum_to_one(self):
        # probe the softmax directly with the same energy computation
        stage = SelfAttentionStage(4, reduction=2)
        rng = Rng(4)
        for t in (stage.query, stage.key, stage.value, stage.proj):
            t.data = rng.normal(t.shape)
        x = rng.normal((1, 4, 3, 3))
        q = np.einsum("ic,chw->ihw", stage.query.data.reshape(2, 4),
                      x[0]).reshape(2, 9)
        k = np.einsum("ic,chw->ihw", stage.key.data.reshape(2, 4),
                      x[0]).reshape(2, 9)
        energy = (q.T @ k) / math.sqrt(2)
        beta = T.softmax_temperature(Tensor(energy), 1.0).data
        assert np.max(np.abs(beta.sum(axis=-1) - 1.0)) < 1e-12

    def test_matches_brute_force_oracle(self):
        rng = Rng(20)
        for trial in range(20):
            stage = SelfAttentionStage(4, reduction=2)
            for t in (stage.query, stage.key, stage.value, stage.proj):
                t.data = rng.normal(t.shape)
            x = rng.normal((1, 4, 3, 3))
            got = attention_map(stage, Tensor(x)).data
            want = brute_force_attention(x, stage)
            assert np.max(np.abs(got - want)) < 1e-10, f"trial {trial}"

    def test_channel_mismatch(self):
        stage = SelfAttentionStage(4)
        with pytest.raises(DimensionError):
            attention_map(stage, Tensor(np.zeros((1, 3, 2, 2))))

    def test_gradients_through_stage(self):
        stage = SelfAttentionStage(3, reduction=2)
        rng = Rng(30)
        for t in (stage.query, stage.key, stage.value, stage.proj):
            t.data = rng.normal(t.shape)
        x = Tensor(rng.normal((2, 3, 2, 2)))
        assert T.grad_check(
            lambda t: T.tsum(T.square(attention_map(stage, t))), x) < 1e-5
        # and w.r.t. the stage weights, perturbed in place
        err = T.grad_check_params(
            lambda: T.tsum(T.square(attention_map(stage, x))),
            [stage.query, stage.key, stage.value, stage.proj])
        assert err < 1e-5


class TestForward:
    def test_first_task_empty_old_head(self):
        m = make_model(0, 5)
        out = m.forward(Tensor(Rng(1).normal((3, 1, 8, 8))))
        assert out.logits_old.shape == (3, 0)
        assert out.logits_new.shape == (3, 5)
        assert out.var_old.shape == (3, 0)

    def test_deterministic_with_dropout_off(self):
        m = make_model(2, 3)
        x = Tensor(Rng(2).normal((2, 1, 8, 8)))
        a, b = m.forward(x), m.forward(x)
        assert np.array_equal(a.logits_new.data, b.logits_new.data)
        assert np.array_equal(a.var_old.data, b.var_old.data)
        for s in range(3):
            assert np.array_equal(a.attention[s].data, b.attention[s].data)

    def test_mc_eval_draws_differ(self):
        arch = ArchConfig(in_channels=1, widths=(2, 3, 4), dropout=0.5)
        m = make_model(0, 3, arch=arch)
        x = Tensor(Rng(3).normal((2, 1, 8, 8)))
        rng = Rng(99)
        a = m.forward(x, mode="mc-eval", rng=rng)
        b = m.forward(x, mode="mc-eval", rng=rng)
        assert np.any(a.logits_new.data != b.logits_new.data)

    def test_variance_strictly_positive(self):
        m = make_model(2, 3)
        out = m.forward(Tensor(Rng(4).normal((4, 1, 8, 8)) * 10.0))
        assert np.all(out.var_old.data > 0.0)
        assert np.all(out.var_new.data > 0.0)

    def test_spatial_mismatch(self):
        m = make_model(0, 2)
        with pytest.raises(DimensionError):
            m.forward(Tensor(np.zeros((1, 2, 8, 8))))

    def test_zero_gain_equals_plain_conv_stack(self):
        m = make_model(1, 2, seed=8)
        x = Tensor(Rng(5).normal((2, 1, 8, 8)))
        out = m.forward(x)

        h = x
        for i in range(3):
            h = T.relu(T.add(T.conv2d(h, m.conv_w[i], pad=1),
                             T.reshape(m.conv_b[i], (-1, 1, 1))))
            h = T.avg_pool2d(h, 2)
        feats = T.tmean(h, axis=(2, 3))
        want = m.head_new(feats)
        assert np.array_equal(out.logits_new.data, want.data)


class TestDropoutLayer:
    def test_off_is_identity(self):
        d = DropoutLayer(0.4)
        x = Tensor(Rng(6).normal((3, 5)))
        assert T.mul is not None
        assert np.array_equal(d(x, "off", None).data, x.data)

    def test_scaling_preserves_mean(self):
        d = DropoutLayer(0.1)
        x = Tensor(np.ones((200, 50)))
        out = d(x, "train", Rng(7))
        kept = out.data[out.data > 0]
        assert np.allclose(kept, 1.0 / 0.9)
        assert abs(out.data.mean() - 1.0) < 0.02

    def test_bad_mode(self):
        with pytest.raises(ParameterError):
            DropoutLayer(0.1)(Tensor([1.0]), "eval", Rng(0))

    def test_mc_dropout_mean_approaches_deterministic(self):
        # law of large numbers on a linear model: dropout -> dense
        rng = Rng(12)
        dense = DenseLayer(3, 20)
        dense.weight.data = rng.normal((3, 20))
        dense.bias.data = rng.normal(3)
        drop = DropoutLayer(0.1)
        x = Tensor(rng.normal((1, 20)))
        want = dense(x).data
        mrng = Rng(13)
        total = np.zeros_like(want)
        n = 10_000
        for _ in range(n):
            total += dense(drop(x, "mc-eval", mrng)).data
        rel = np.abs(total / n - want) / np.maximum(np.abs(want), 1e-8)
        assert np.max(rel) < 0.02


class TestVarianceHead:
    def test_positive_for_extreme_inputs(self):
        head = VarianceHead(4, 8)
        head.weight.data = Rng(9).normal((4, 8)) * 50.0
        head.bias.data = np.array([-1000.0, 0.0, 1000.0, -5.0])
        out = head(Tensor(Rng(10).normal((6, 8)) * 100.0))
        assert np.all(out.data > 0.0)


class TestExpandHeads:
    def test_coverage_counts(self):
        m = make_model(10, 10, seed=1)
        grown = expand_heads(m, 10, Rng(2))
        assert grown.n_old == 20 and grown.n_new == 10

    def test_first_expansion(self):
        m = make_model(0, 5, seed=1)
        grown = expand_heads(m, 5, Rng(2))
        assert grown.n_old == 5 and grown.n_new == 5

    def test_backbone_carry_over(self):
        m = make_model(2, 3, seed=4)
        before = {n: t.data.copy() for n, t in m.backbone_parameters()}
        grown = expand_heads(m, 4, Rng(5))
        for n, t in grown.backbone_parameters():
            assert np.array_equal(t.data, before[n]), n

    def test_old_logit_continuity(self):
        m = make_model(3, 2, seed=6)
        grown = expand_heads(m, 4, Rng(7))
        x = Tensor(Rng(8).normal((5, 1, 8, 8)))
        old = m.forward(x)
        new = grown.forward(x)
        want = np.concatenate([old.logits_old.data, old.logits_new.data], axis=1)
        assert np.max(np.abs(new.logits_old.data - want)) < 1e-12
        wantv = np.concatenate([old.var_old.data, old.var_new.data], axis=1)
        assert np.max(np.abs(new.var_old.data - wantv)) < 1e-12


class TestSnapshot:
    def test_copy_semantics(self):
        m = make_model(2, 3, seed=11)
        s = snapshot(m)
        x = Tensor(Rng(12).normal((2, 1, 8, 8)))
        a, b = m.forward(x), s.forward(x)
        assert np.array_equal(a.logits_new.data, b.logits_new.data)
        assert np.array_equal(a.logits_old.data, b.logits_old.data)

    def test_isolation_after_update(self):
        m = make_model(2, 3, seed=13)
        s = snapshot(m)
        frozen = {n: t.data.copy() for n, t in s.model.parameters()}
        x = Tensor(Rng(14).normal((4, 1, 8, 8)))
        tape = T.Tape()
        with T.recording(tape):
            out = m.forward(x)
            loss = T.tsum(T.square(out.logits_new))
        tape.backward(loss)
        for _, t in m.parameters():
            if t.grad is not None:
                t.data = t.data - 0.1 * t.grad
        for n, t in s.model.parameters():
            assert np.array_equal(t.data, frozen[n]), n

    def test_idempotent_content(self):
        m = make_model(1, 2, seed=15)
        s1 = snapshot(m)
        s2 = ModelSnapshotOfSnapshot = snapshot(s1.model)
        for (n1, t1), (_, t2) in zip(s1.model.parameters(), s2.model.parameters()):
            assert np.array_equal(t1.data, t2.data), n1

    def test_snapshot_params_do_not_record(self):
        m = make_model(1, 2, seed=16)
        s = snapshot(m)
        tape = T.Tape()
        with T.recording(tape):
            s.forward(Tensor(np.zeros((1, 1, 8, 8))))
        assert len(tape) == 0


class TestInit:
    def test_gain_zero(self):
        m = make_model(2, 3, seed=17)
        for i in range(3):
            assert m.stages[i].gain.data[0] == 0.0

    def test_same_seed_identical(self):
        a = make_model(2, 3, seed=18)
        b = make_model(2, 3, seed=18)
        for (n, ta), (_, tb) in zip(a.parameters(), b.parameters()):
            assert np.array_equal(ta.data, tb.data), n

    def test_fan_in_bound(self):
        layer = DenseLayer(7, 100)
        m = make_model(0, 2)
        # bound check straight from the formula: fan_in 100 -> |w| < 0.1
        rng = Rng(19)
        layer.weight.data = (rng.uniform(layer.weight.shape) * 2.0 - 1.0) * math.sqrt(1.0 / 100)
        assert np.all(np.abs(layer.weight.data) < 0.1)
        # and via init_parameters on a model head with fan_in 4 (tiny arch)
        assert np.all(np.abs(m.head_new.weight.data) < math.sqrt(1.0 / 4) + 1e-15)


class TestSerialization:
    def test_round_trip_bit_exact(self, tmp_path):
        m = make_model(3, 2, seed=21)
        path = tmp_path / "model.evln"
        save_model(m, path)
        other = IncrementalModel(TINY, 3, 2)
        load_model(other, path)
        for (n, ta), (_, tb) in zip(m.parameters(), other.parameters()):
            assert np.array_equal(ta.data, tb.data), n

    def test_container_round_trip_preserves_empty(self, tmp_path):
        path = tmp_path / "t.evln"
        named = {"a": Rng(22).normal((2, 3)), "empty": np.zeros((0, 4))}
        write_tensors(path, named)
        out = read_tensors(path)
        assert np.array_equal(out["a"], named["a"])
        assert out["empty"].shape == (0, 4)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.evln"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(FormatError, match="NOPE"):
            read_tensors(path)

    def test_truncated(self, tmp_path):
        m = make_model(1, 2, seed=23)
        path = tmp_path / "model.evln"
        save_model(m, path)
        blob = path.read_bytes()
        path.write_bytes(blob[: len(blob) // 2])
        with pytest.raises(FormatError):
            read_tensors(path)


class TestModelGradients:
    def test_full_backbone_grad_check(self):
        m = make_model(2, 2, seed=24)
        x = Tensor(Rng(25).normal((2, 1, 8, 8)))
        # make the attention path carry real signal so the finite-difference
        # comparison is well conditioned at every stage
        for i, g in enumerate((0.6, -0.5, 0.7)):
            m.stages[i].gain.data = np.array([g])
            for t in (m.stages[i].query, m.stages[i].key,
                      m.stages[i].value, m.stages[i].proj):
                t.data = t.data * 4.0

        def build_loss():
            out = m.forward(x)
            return T.tsum(T.add(T.square(out.logits_new),
                                T.square(out.logits_old)))

        err = T.grad_check_params(build_loss, [t for _, t in m.parameters()],
                                  eps=1e-4)
        assert err < 1e-4, err
