import math

import numpy as np
import pytest

from gradcheck import jscc_gradcheck
from fpcc.errors import DegenerateInputError, ShapeError, TrainingError
from fpcc.geometry import ChannelConfig
from fpcc.jscc import (
    Adam,
    ComplexSignal,
    complex_awgn,
    complex_map,
    complex_unmap,
    evaluate_mse,
    init_jscc,
    jscc_decode,
    jscc_encode,
    mse_loss,
    power_denormalize,
    power_normalize,
    synthetic_attribute_frames,
    train_phase_two,
    transmit_attributes,
    write_training_log,
)
from fpcc.tensor_core import ParamStore


def leaky(z):
    return np.where(z > 0, z, 0.01 * z)


def sig(z):
    return 1 / (1 + np.exp(-z))


def lin(store, name, x):
    return x @ store[f"{name}.w"] + store[f"{name}.b"]


def encoder_oracle(store, x, snr, wiring="serial"):
    """Equation-by-equation evaluation from the raw parameter arrays."""
    b1 = leaky(lin(store, "enc.res1.fc2", leaky(lin(store, "enc.res1.fc1", x)))) + lin(store, "enc.res1.skip", x)
    s = np.full((x.shape[0], 8), min(snr, 40) / 20)
    h = leaky(lin(store, "enc.mod.fc_l", np.hstack([b1, s])))
    b2 = b1 * (sig(lin(store, "enc.mod.fc_s", h)) + lin(store, "enc.mod.fc", h))
    src = b2 if wiring == "serial" else b1
    return leaky(lin(store, "enc.res2.fc2", leaky(lin(store, "enc.res2.fc1", src)))) + src


def decoder_oracle(store, r, snr):
    b1 = leaky(lin(store, "dec.res1.fc2", leaky(lin(store, "dec.res1.fc1", r)))) + r
    s = np.full((r.shape[0], 8), min(snr, 40) / 20)
    h = leaky(lin(store, "dec.mod.fc_l", np.hstack([b1, s])))
    b2 = b1 * (sig(lin(store, "dec.mod.fc_s", h)) + lin(store, "dec.mod.fc", h))
    return leaky(lin(store, "dec.res2.fc2", leaky(lin(store, "dec.res2.fc1", b2)))) + lin(store, "dec.res2.skip", b2)


def randomize_biases(store, rng):
    for name, p in store.items():
        if name.endswith(".b"):
            store[name] = rng.normal(0, 0.1, p.shape)


def test_dims_and_param_count():
    enc, dec = init_jscc(0)
    x = np.random.default_rng(0).normal(size=(7, 8))
    f = jscc_encode(x, 5.0, enc)
    assert f.shape == (7, 40)
    out = jscc_decode(f, 5.0, dec)
    assert out.shape == (7, 8) and np.all(np.isfinite(out))
    assert enc.store["enc.mod.fc_l.w"].shape == (48, 40)
    with pytest.raises(ShapeError):
        jscc_encode(np.zeros((2, 7)), 0.0, enc)
    with pytest.raises(ShapeError):
        jscc_decode(np.zeros((2, 39)), 0.0, dec)


def test_zero_input_zero_output():
    enc, _ = init_jscc(3)
    assert not jscc_encode(np.zeros((4, 8)), 10.0, enc).any()


@pytest.mark.parametrize("wiring", ["serial", "literal"])
def test_composition_oracle(wiring, rng):
    enc, dec = init_jscc(1, wiring=wiring)
    randomize_biases(enc.store, rng)
    x = rng.normal(size=(9, 8))
    for snr in (0.0, 7.5, math.inf):
        assert np.allclose(jscc_encode(x, snr, enc), encoder_oracle(enc.store, x, snr, wiring), atol=1e-12)
        r = rng.normal(size=(9, 40))
        assert np.allclose(jscc_decode(r, snr, dec), decoder_oracle(dec.store, r, snr), atol=1e-12)


def test_complex_map_rows():
    x = np.array([[1.0, 2.0], [3.0, 4.0]])
    s = complex_map(x)
    assert s.re.tolist() == [1.0, 2.0] and s.im.tolist() == [3.0, 4.0]
    assert np.array_equal(complex_unmap(s), x)


def test_complex_map_index_oracle(rng):
    x = rng.normal(size=(5, 3))  # 15 values, one pad sample
    s = complex_map(x)
    assert s.pad == 1 and s.re.size == 8
    flat = [x[i // 3, i % 3] for i in range(15)] + [0.0]
    assert s.re.tolist() == flat[:8] and s.im.tolist() == flat[8:]
    assert np.array_equal(complex_unmap(s), x)
    with pytest.raises(ShapeError):
        complex_map(x, pad_odd=False)


def test_power_normalize():
    s = power_normalize(ComplexSignal(np.full(4, 2.0), np.zeros(4)))
    assert s.scale == 2.0 and np.allclose(s.re, 1.0)
    with pytest.raises(DegenerateInputError):
        power_normalize(ComplexSignal(np.zeros(3), np.zeros(3)))


def test_power_normalize_random(rng):
    for _ in range(50):
        z = ComplexSignal(rng.normal(0, rng.uniform(0.01, 100), 33), rng.normal(size=33))
        n = power_normalize(z)
        assert abs(n.power - 1.0) <= 1e-10
        back = power_denormalize(n)
        assert np.max(np.abs(back.re - z.re)) < 1e-12 * max(1, np.abs(z.re).max())


def test_complex_awgn():
    z = ComplexSignal(np.zeros(1_000_000), np.zeros(1_000_000))
    y = complex_awgn(z, ChannelConfig(0.0, 9))
    assert abs(y.re.var() - 0.5) < 0.005 and abs(y.im.var() - 0.5) < 0.005
    y2 = complex_awgn(z, ChannelConfig(0.0, 9))
    assert np.array_equal(y.re, y2.re)
    clean = complex_awgn(ComplexSignal(np.ones(3), np.ones(3)), ChannelConfig(math.inf))
    assert clean.re.tolist() == [1.0] * 3


def test_transmit_unit_power_and_noiseless(rng):
    f = rng.normal(3, 5, size=(11, 40))
    rx, p = transmit_attributes(f, ChannelConfig(math.inf))
    assert abs(p - 1) <= 1e-10
    assert np.allclose(rx, f, atol=1e-12)


def test_mse():
    a = np.ones((3, 4))
    assert mse_loss(a, a) == 0.0
    assert mse_loss(a, a + 1) == 1.0
    with pytest.raises(ShapeError):
        mse_loss(a, np.ones((4, 3)))


def test_mse_summation_oracle(rng):
    a, b = rng.normal(size=(2, 20, 8))
    ref = math.fsum(((a - b) ** 2).ravel()) / a.size
    assert mse_loss(a, b) == pytest.approx(ref, rel=1e-13)


@pytest.mark.parametrize("wiring,snr", [("serial", 3.0), ("literal", 12.0)])
def test_gradients_small_model(wiring, snr, rng):
    enc, dec = init_jscc(4, width=6, wiring=wiring)
    randomize_biases(enc.store, rng)
    worst, n = jscc_gradcheck(enc, dec, rng.normal(size=(5, 8)), snr)
    assert n == enc.store.n_params()
    assert worst < 1e-4


def test_adam_coupled_decay():
    store = ParamStore(0)
    store.declare("p", (1,), "ones")
    opt = Adam(store, lr=0.1, weight_decay=0.5)
    opt.step({"p": np.zeros(1)})
    # first Adam step moves by lr * sign(g + wd * p)
    assert store["p"][0] == pytest.approx(0.9, abs=1e-7)


def test_training_reduces_loss():
    data = synthetic_attribute_frames(100, rows=32, seed=1)
    res = train_phase_two(data, snr_range=(math.inf, math.inf), epochs=5, lr=1e-3, seed=2)
    assert all(b < a for a, b in zip(res.losses, res.losses[1:]))


def test_training_divergence_reported():
    data = [np.full((4, 8), 1e200)]
    with pytest.raises(TrainingError) as exc:
        train_phase_two(data, epochs=2, lr=1e-3)
    assert exc.value.epoch == 0


def test_training_log_and_snr_order(tmp_path):
    data = synthetic_attribute_frames(60, rows=32, seed=3)
    held = synthetic_attribute_frames(20, rows=32, seed=4)
    res = train_phase_two(data, epochs=3, lr=1e-3, seed=5, eval_frames=held, eval_snrs=(0.0, 20.0))
    assert evaluate_mse(res.encoder, res.decoder, held, 20.0) <= evaluate_mse(res.encoder, res.decoder, held, 0.0)
    p = tmp_path / "log.csv"
    write_training_log(res.eval_rows, p)
    lines = p.read_text().splitlines()
    assert lines[0] == "epoch,loss,mse@0dB,mse@20dB" and len(lines) == 4
