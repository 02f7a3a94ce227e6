import math

import numpy as np
import pytest

from citympc.autodiff import Tensor
from citympc.errors import (BadMagicError, DivergedRunError,
                            TruncatedFileError, VersionError)
from citympc.model import ModelConfig
from citympc.training import (ADAM_BETA1, ADAM_BETA2, ADAM_EPS, CKPT_MAGIC,
                              TrainState, adamw_update, assemble_batch,
                              beta_at, checkpoint_is_kept, final_uw_verdict,
                              load_checkpoint, lr_at, save_checkpoint,
                              train_run, train_step)

from test_datafile import make_dataset

CFG = ModelConfig(capacity=5, d_z=4, d_scene=8, d_model=8, heads=2,
                  patch_size=2, pov_resolution=4, ffn_width=8,
                  coord_feature_dim=8, batch_size=4, train_steps=12,
                  lr_warmup_steps=2, beta_warmup_steps=3)


class TestSchedules:
    def test_lr_warmup_linear(self):
        assert lr_at(CFG, 1) == pytest.approx(CFG.lr_peak / 2)
        assert lr_at(CFG, 2) == pytest.approx(CFG.lr_peak)

    def test_lr_cosine_tail(self):
        assert lr_at(CFG, CFG.train_steps) == pytest.approx(
            CFG.lr_min_ratio * CFG.lr_peak, rel=1e-12)
        mids = [lr_at(CFG, s) for s in range(2, CFG.train_steps + 1)]
        assert all(a >= b for a, b in zip(mids, mids[1:]))

    def test_beta_ramp(self):
        assert beta_at(CFG, 1) == pytest.approx(CFG.beta_max / 3)
        assert beta_at(CFG, 3) == pytest.approx(CFG.beta_max)
        assert beta_at(CFG, 100) == CFG.beta_max


class TestAdamW:
    def _state(self, grads):
        params = {}
        for name, g in grads.items():
            t = Tensor(np.ones_like(g), requires_grad=True)
            t.grad = g.copy()
            params[name] = t
        st = TrainState(cfg=CFG, params=params,
                        m={n: np.zeros_like(g) for n, g in grads.items()},
                        v={n: np.zeros_like(g) for n, g in grads.items()},
                        step=0)
        return st

    def test_first_step_matches_reference(self):
        g = np.array([0.3, -0.2])
        st = self._state({"w": g})
        lr = 1e-3
        norm = adamw_update(st, lr)
        assert norm == pytest.approx(np.linalg.norm(g), rel=1e-12)
        m = (1 - ADAM_BETA1) * g
        v = (1 - ADAM_BETA2) * g * g
        update = (m / (1 - ADAM_BETA1)) / (np.sqrt(v / (1 - ADAM_BETA2)) + ADAM_EPS)
        expected = 1.0 - lr * update
        expected -= lr * CFG.weight_decay * expected
        np.testing.assert_allclose(st.params["w"].data, expected, rtol=1e-12)

    def test_global_norm_clip(self):
        g = np.array([30.0, 40.0])  # norm 50 > clip 1.0
        st = self._state({"w": g})
        adamw_update(st, 1e-3)
        np.testing.assert_allclose(st.m["w"], (1 - ADAM_BETA1) * g / 50.0,
                                   rtol=1e-12)

    def test_kendall_gets_scaled_lr_and_no_decay(self):
        g = np.full(7, 1e-4)
        st = self._state({"kendall.s": g})
        lr = 1e-3
        adamw_update(st, lr)
        m = (1 - ADAM_BETA1) * g
        v = (1 - ADAM_BETA2) * g * g
        update = (m / (1 - ADAM_BETA1)) / (np.sqrt(v / (1 - ADAM_BETA2)) + ADAM_EPS)
        expected = 1.0 - lr * CFG.uw_lr_scale * update  # no weight decay term
        np.testing.assert_allclose(st.params["kendall.s"].data, expected,
                                   rtol=1e-12)


class TestLoop:
    def test_train_step_row_and_progress(self):
        ds = make_dataset(n_records=9)
        state = TrainState.initialize(CFG, seed=0)
        batch = assemble_batch(ds.split_records(0), np.asarray(ds.heightmap, float))
        row = train_step(state, batch)
        assert state.step == 1 and row["step"] == 1
        for key in ("total", "kl", "grad_norm", "loss_presence", "sigma_gain"):
            assert math.isfinite(row[key])
        assert all(p.grad is None for p in state.params.values())

    def test_deterministic_given_seed(self):
        ds = make_dataset(n_records=9)
        _, rows1 = train_run(ds, CFG, seed=4, steps=5)
        _, rows2 = train_run(ds, CFG, seed=4, steps=5)
        assert [r["total"] for r in rows1] == [r["total"] for r in rows2]
        _, rows3 = train_run(ds, CFG, seed=5, steps=5)
        assert [r["total"] for r in rows1] != [r["total"] for r in rows3]

    @pytest.mark.filterwarnings("ignore:invalid value encountered")
    def test_divergence_raises_and_preserves_params(self):
        ds = make_dataset(n_records=9)
        state = TrainState.initialize(CFG, seed=0)
        state.params["dec.prx.W"].data[:] = np.inf
        batch = assemble_batch(ds.split_records(0), np.asarray(ds.heightmap, float))
        with pytest.raises(DivergedRunError):
            train_step(state, batch)
        assert state.step == 0


class TestCheckpoint:
    def test_resume_is_bit_exact(self, tmp_path):
        ds = make_dataset(n_records=9)
        # uninterrupted reference: 6 steps
        ref_state, ref_rows = train_run(ds, CFG, seed=2, steps=6)
        # interrupted: 3 steps, save, load, 3 more
        half, rows_a = train_run(ds, CFG, seed=2, steps=3)
        path = tmp_path / "half.mpck"
        save_checkpoint(half, path, seed=2)
        resumed, header = load_checkpoint(path)
        assert header["step"] == 3
        resumed2, rows_b = train_run(ds, CFG, seed=2, steps=3, state=resumed)
        assert [r["total"] for r in rows_a + rows_b] == \
            [r["total"] for r in ref_rows]
        for name in ref_state.params:
            np.testing.assert_array_equal(ref_state.params[name].data,
                                          resumed2.params[name].data)
            np.testing.assert_array_equal(ref_state.m[name], resumed2.m[name])
            np.testing.assert_array_equal(ref_state.v[name], resumed2.v[name])

    def test_header_contents_and_verdict(self, tmp_path):
        ds = make_dataset(n_records=9)
        state, _ = train_run(ds, CFG, seed=1, steps=2)
        path = tmp_path / "c.mpck"
        save_checkpoint(state, path, seed=1, extra={"note": "x"})
        _, header = load_checkpoint(path)
        assert header["seed"] == 1 and header["extra"] == {"note": "x"}
        assert header["config"]["d_model"] == CFG.d_model
        # fresh runs have sigma near 1: not converged, filtered out
        assert not header["uw_verdict"]["kept"]
        assert not checkpoint_is_kept(header)
        v = final_uw_verdict(state)
        assert v["sigma_presence"] == pytest.approx(
            header["uw_verdict"]["sigma_presence"])

    def test_malformed_checkpoints(self, tmp_path):
        ds = make_dataset(n_records=9)
        state, _ = train_run(ds, CFG, seed=1, steps=1)
        path = tmp_path / "c.mpck"
        save_checkpoint(state, path, seed=1)
        raw = path.read_bytes()
        assert raw[:4] == CKPT_MAGIC
        bad = tmp_path / "bad.mpck"
        bad.write_bytes(b"NOPE" + raw[4:])
        with pytest.raises(BadMagicError):
            load_checkpoint(bad)
        bad.write_bytes(raw[:4] + b"\x63\x00\x00\x00" + raw[8:])
        with pytest.raises(VersionError):
            load_checkpoint(bad)
        bad.write_bytes(raw[:-9])
        with pytest.raises(TruncatedFileError):
            load_checkpoint(bad)
        bad.write_bytes(raw + b"\x00")
        with pytest.raises(TruncatedFileError):
            load_checkpoint(bad)
