import numpy as np
import pytest

import oracles
from conftest import randomize, tiny_config
from dynln.adapt import GeneratedLn
from dynln.norm import GateLnParams, LnParams
from dynln.recurrent import (AcousticModel, CellState, LstmpLayerParams, StackConfig,
                             bidir_layer, count_params, format_count, load_checkpoint,
                             lstmp_step, param_shapes, save_checkpoint, stack_forward)
from dynln.tensor import Tensor, grad_check, no_grad
from dynln.train import init_model, nll_loss


def _layer(d, dp, n_in, rng=None, zero=False):
    def mat(*s):
        return Tensor(np.zeros(s) if zero else rng.standard_normal(s) * 0.5)

    def vec(base):
        return Tensor(np.full(d, base) if zero else base + 0.3 * rng.standard_normal(d))

    gates = ("i", "f", "o", "g")
    gate_ln = GateLnParams(Tensor(np.stack([vec(1.0).data for _ in gates])),
                           Tensor(np.stack([vec(1.0).data for _ in gates])),
                           Tensor(np.stack([vec(0.0).data for _ in gates])))
    return LstmpLayerParams(W={g: mat(d, n_in) for g in gates}, U={g: mat(d, dp) for g in gates},
                            W_p=mat(dp, d), gate_ln=gate_ln, cell_ln=LnParams(vec(1.0), vec(0.0)))


def _as_params(p: LstmpLayerParams, pre="x."):
    P = {}
    for k, g in enumerate(("i", "f", "o", "g")):
        P[pre + f"W_{g}"] = p.W[g].data
        P[pre + f"U_{g}"] = p.U[g].data
        P[pre + f"scale_x_{g}"] = p.gate_ln.scale_x.data[k]
        P[pre + f"scale_h_{g}"] = p.gate_ln.scale_h.data[k]
        P[pre + f"shift_{g}"] = p.gate_ln.shift.data[k]
    P[pre + "scale_c"] = p.cell_ln.scale.data
    P[pre + "shift_c"] = p.cell_ln.shift.data
    P[pre + "W_p"] = p.W_p.data
    return P


def test_zero_network_step():
    p = _layer(4, 2, 3, zero=True)
    p.gate_ln = GateLnParams(Tensor(np.zeros((4, 4))), Tensor(np.zeros((4, 4))),
                             Tensor(np.zeros((4, 4))))
    p.cell_ln = LnParams(np.zeros(4), np.zeros(4))
    s = lstmp_step(p, None, np.ones(3))
    assert not s.h.data.any() and not s.c.data.any()


def test_saturated_forget_gate_carries_memory():
    p = _layer(4, 2, 3, zero=True)
    shift = np.zeros((4, 4))
    shift[0] = -40.0  # input gate closed
    shift[1] = 40.0  # forget gate open
    p.gate_ln = GateLnParams(Tensor(np.zeros((4, 4))), Tensor(np.zeros((4, 4))), Tensor(shift))
    v = np.array([0.5, -1.0, 2.0, 0.25])
    prev = CellState(Tensor(np.zeros(2)), Tensor(v))
    for _ in range(5):
        prev = lstmp_step(p, None, np.ones(3), prev)
    np.testing.assert_allclose(prev.c.data, v, rtol=1e-12)


def test_step_matches_straight_line_oracle(rng):
    p = _layer(4, 2, 3, rng)
    x, h0, c0 = rng.standard_normal(3), rng.standard_normal(2), rng.standard_normal(4)
    s = lstmp_step(p, None, x, CellState(Tensor(h0), Tensor(c0)))
    P = _as_params(p)
    gates = oracles.gate_params(P, "x.")
    h, c = oracles.cell_step(P, "x.", x, h0, c0, 1e-5, gates, (P["x.scale_c"], P["x.shift_c"]))
    np.testing.assert_allclose(s.h.data, h, rtol=0, atol=1e-12)
    np.testing.assert_allclose(s.c.data, c, rtol=0, atol=1e-12)


def test_step_with_generated_ln(rng):
    p = _layer(4, 2, 3, rng)
    gen = GeneratedLn(GateLnParams(*(Tensor(rng.standard_normal((1, 4, 4))) for _ in range(3))),
                      LnParams(rng.standard_normal((1, 4)), rng.standard_normal((1, 4))))
    x = rng.standard_normal(3)
    s = lstmp_step(p, gen, x)
    P = _as_params(p)
    gates = {g: tuple(t.data[0, k] for t in (gen.gates.scale_x, gen.gates.scale_h, gen.gates.shift))
             for k, g in enumerate(oracles.GATES)}
    h, _ = oracles.cell_step(P, "x.", x, np.zeros(2), np.zeros(4), 1e-5, gates,
                             (gen.cell.scale.data[0], gen.cell.shift.data[0]))
    np.testing.assert_allclose(s.h.data, h, atol=1e-12)


def test_step_shape_error(rng):
    with pytest.raises(ValueError):
        lstmp_step(_layer(4, 2, 3, rng), None, np.ones(5))


def test_gate_ranges(rng):
    p = _layer(6, 3, 4, rng)
    prev = None
    for _ in range(20):
        prev = lstmp_step(p, None, 5 * rng.standard_normal(4), prev)
        # c' in (-1, 1) and gates in (0, 1) bound the cell growth per step
        assert np.all(np.isfinite(prev.c.data))


def test_bidir_single_frame(rng):
    f, b = _layer(4, 2, 3, rng), _layer(4, 2, 3, rng)
    x = rng.standard_normal((1, 3))
    out, _ = bidir_layer(f, b, x)
    expect = np.concatenate([lstmp_step(f, None, x[0]).h.data, lstmp_step(b, None, x[0]).h.data])
    np.testing.assert_allclose(out.data[0, 0], expect, atol=1e-15)


def test_bidir_time_reversal_symmetry(rng):
    f, b = _layer(4, 2, 3, rng), _layer(4, 2, 3, rng)
    x = rng.standard_normal((6, 3))
    out, _ = bidir_layer(f, b, x)
    rev, _ = bidir_layer(b, f, x[::-1].copy())
    o, r = out.data[:, 0], rev.data[::-1, 0]
    np.testing.assert_array_equal(o[:, :2], r[:, 2:])
    np.testing.assert_array_equal(o[:, 2:], r[:, :2])


def test_bidir_matches_unrolled_oracle(rng):
    f, b = _layer(4, 2, 3, rng), _layer(4, 2, 3, rng)
    x = rng.standard_normal((3, 3))
    out, _ = bidir_layer(f, b, x)
    Pf, Pb = _as_params(f, "f."), _as_params(b, "b.")
    of, _ = oracles.direction(Pf, "f.", list(x), 1e-5, False, 4, 2)
    ob, _ = oracles.direction(Pb, "b.", list(x), 1e-5, True, 4, 2)
    expect = np.array([np.concatenate([of[t], ob[t]]) for t in range(3)])
    np.testing.assert_allclose(out.data[:, 0], expect, atol=1e-12)


def test_bidir_empty_sequence(rng):
    f = _layer(4, 2, 3, rng)
    with pytest.raises(ValueError):
        bidir_layer(f, f, np.zeros((0, 3)))


def test_padding_does_not_change_valid_outputs(tiny_dln, rng):
    a, b = rng.standard_normal((4, 5)), rng.standard_normal((7, 5))
    frames = np.zeros((7, 2, 5))
    frames[:4, 0], frames[:, 1] = a, b
    frames[4:, 0] = 100.0  # garbage in the padding
    mask = np.zeros((7, 2))
    mask[:4, 0] = 1
    mask[:, 1] = 1
    with no_grad():
        batched, sb = stack_forward(tiny_dln, frames, mask)
        la, sa = stack_forward(tiny_dln, a)
        lb, _ = stack_forward(tiny_dln, b)
    np.testing.assert_allclose(batched.data[:4, 0], la.data, atol=1e-12)
    np.testing.assert_allclose(batched.data[:, 1], lb.data, atol=1e-12)
    for l in range(2):
        for k in range(2):
            np.testing.assert_allclose(sb[l][k].data[0], sa[l][k].data, atol=1e-12)


def test_zero_model_logits():
    cfg = StackConfig(num_layers=1, cell_size=4, proj_size=2, input_dim=3, num_classes=2)
    m = init_model(cfg)
    for p in m.parameters():
        p.data[...] = 0
    logits, _ = stack_forward(m, np.ones((5, 3)))
    assert not logits.data.any()


@pytest.mark.parametrize("dln", [False, True])
def test_stack_matches_oracle(dln, rng):
    cfg = tiny_config(dln_enabled=dln)
    m = randomize(init_model(cfg, 0), seed=5)
    frames = rng.standard_normal((4, 5))
    logits, summaries = stack_forward(m, frames)
    P = {k: v.data for k, v in m.named_parameters()}
    expect, esum = oracles.forward(P, cfg, frames)
    np.testing.assert_allclose(logits.data, expect, rtol=0, atol=1e-12)
    if dln:
        for l in range(cfg.num_layers):
            for k in range(2):
                np.testing.assert_allclose(summaries[l][k].data, esum[l][k], atol=1e-12)


def test_stack_with_cell_state_generation_matches_oracle(rng):
    cfg = tiny_config(dln_enabled=True, dln_cell_state=True)
    m = randomize(init_model(cfg, 0), seed=6)
    frames = rng.standard_normal((3, 5))
    P = {k: v.data for k, v in m.named_parameters()}
    np.testing.assert_allclose(stack_forward(m, frames)[0].data, oracles.forward(P, cfg, frames)[0],
                               atol=1e-12)


def test_stack_dimension_mismatch(tiny_static):
    with pytest.raises(ValueError):
        stack_forward(tiny_static, np.ones((3, 4)))


def test_dln_degenerates_to_static(rng):
    dcfg = tiny_config(dln_enabled=True)
    dln = randomize(init_model(dcfg, 0), seed=3)
    static = init_model(tiny_config(), 0)
    for name, p in dln.named_parameters():
        if name.endswith(".W") and ".gen." in name:
            p.data[...] = 0.0
    for name, p in static.named_parameters():
        if name in dln.params:
            p.data[...] = dln.params[name].data
    for l in (1, 2):
        for d in ("fwd", "bwd"):
            pre = f"layer{l}.{d}."
            for g in ("i", "f", "o", "g"):
                for t in ("scale_x", "scale_h", "shift"):
                    static.params[pre + f"{t}_{g}"].data[...] = dln.params[pre + f"gen.{g}.{t}.b"].data
    frames = rng.standard_normal((6, 3, 5))
    with no_grad():
        a = stack_forward(dln, frames)[0].data
        b = stack_forward(static, frames)[0].data
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)


PAPER_SIZES = [
    (3436, False, 10_435_948, "10.44M"),
    (3436, True, 12_942_444, "12.94M"),
    (4174, False, 10_814_542, "10.81M"),
    (4174, True, 13_321_038, "13.32M"),
]


@pytest.mark.parametrize("classes,dln,exact,rounded", PAPER_SIZES)
def test_count_params_reproduces_reported_sizes(classes, dln, exact, rounded):
    cfg = StackConfig(num_classes=classes, dln_enabled=dln)
    n = count_params(cfg)
    assert n == exact == oracles.count_params(3, 512, 256, 123, classes, dln=dln, p=64)
    assert format_count(n) == f"{exact:,} ({rounded})"


def test_count_params_hand_enumeration():
    # L=1, d=2, d'=1, D=2, C=2, static LN, per direction:
    #   W_g 4*(2*2)=16, U_g 4*(2*1)=8, gate LN 3*4*2=24, cell LN 2*2=4, W_p 1*2=2 -> 54
    # two directions 108, output 2*2 + 2 = 6 -> 114
    cfg = StackConfig(num_layers=1, cell_size=2, proj_size=1, input_dim=2, num_classes=2)
    assert count_params(cfg) == 114


@pytest.mark.parametrize("cell", [False, True])
def test_count_params_matches_oracle_on_odd_shapes(cell):
    cfg = StackConfig(num_layers=2, cell_size=7, proj_size=3, input_dim=5, num_classes=11,
                      dln_enabled=True, summary_size=4, dln_cell_state=cell)
    assert count_params(cfg) == oracles.count_params(2, 7, 3, 5, 11, True, 4, cell)
    assert count_params(cfg) == init_model(cfg).num_params()


def test_dln_delta_independent_of_classes():
    deltas = {c: count_params(StackConfig(num_classes=c, dln_enabled=True))
              - count_params(StackConfig(num_classes=c)) for c in (3436, 4174, 10)}
    assert set(deltas.values()) == {2_506_496}


def test_end_to_end_gradient_check(tiny_static, rng):
    frames = rng.standard_normal((4, 2, 5))
    labels = rng.integers(0, 3, size=(4, 2))
    mask = np.ones((4, 2))
    mask[3, 1] = 0
    params = tiny_static.parameters()

    def loss():
        return nll_loss(stack_forward(tiny_static, frames, mask)[0], labels, mask)

    assert grad_check(loss, params) < 1e-4


def test_checkpoint_round_trip(tmp_path, tiny_dln):
    save_checkpoint(tiny_dln, str(tmp_path / "ck"))
    back = load_checkpoint(str(tmp_path / "ck"))
    assert back.config == tiny_dln.config
    assert list(back.params) == list(tiny_dln.params)
    for k, p in tiny_dln.named_parameters():
        np.testing.assert_array_equal(back.params[k].data, p.data.astype(np.float32))
    names = list(param_shapes(tiny_dln.config))
    assert "layer1.fwd.gen.f.scale_x.W" in names and "output.W_y" in names


def test_checkpoint_truncated_blob(tmp_path, tiny_static):
    from dynln.data import CorruptContainerError

    save_checkpoint(tiny_static, str(tmp_path / "ck"))
    blob = tmp_path / "ck" / "params.f32"
    blob.write_bytes(blob.read_bytes()[:-8])
    with pytest.raises(CorruptContainerError):
        load_checkpoint(str(tmp_path / "ck"))


def test_model_rejects_wrong_params(tiny_static):
    params = dict(tiny_static.params)
    params.pop("output.b_y")
    with pytest.raises(ValueError):
        AcousticModel(tiny_static.config, params)


def test_config_validation():
    with pytest.raises(ValueError):
        StackConfig(cell_size=4, proj_size=4)
    with pytest.raises(ValueError):
        StackConfig(cell_size=8, proj_size=4, summary_size=8, dln_enabled=True)
    with pytest.raises(ValueError):
        StackConfig.from_dict({"num_layers": 2, "bogus": 1})
