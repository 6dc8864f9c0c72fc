"""Numerical verification suites: dense Jacobian log-det checks, full-model
gradient checks against finite differences, invertibility round trips, and
storage round trips. All likelihood math runs in 64-bit here except the
round-trip suite, which deliberately exercises 32-bit inference.

These suites back the `gradcheck` CLI command and the test suite's heavier
correctness checks.
"""

from __future__ import annotations

import os
import tempfile
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import datasets, encoder, storage, training
from .autodiff import Node
from .training import TrainConfig


@dataclass
class SuiteResult:
    name: str
    passed: bool
    detail: str

    def __str__(self):
        mark = "ok" if self.passed else "FAIL"
        return f"{mark:4s} {self.name}: {self.detail}"


def _randomize_flow(model, rng, scale=0.1):
    """Random small parameters so log-dets and couplings are nontrivial.
    Zero-initialized output kernels in particular must move off zero."""
    for name, p in model.parameters().items():
        if name.endswith(".permute.matrix"):
            continue  # already a random rotation
        p.value = (scale * rng.standard_normal(p.value.shape)).astype(p.value.dtype)
    model.mark_initialized()


def _encode_flat(x_flat, model, frame_shape):
    stack = encoder.encode_frame(Node(x_flat.reshape(frame_shape)), model)
    parts = [z.value.ravel() for z in stack.z]
    return np.concatenate(parts), float(stack.log_det.value)


def logdet_suite(draws=20, seed=0, tol=1e-3, fd_step=1e-5):
    """Analytic total log-det of encode_frame vs the log |det| of a dense
    finite-difference Jacobian, on 4x4x3 frames (48 dimensions), for both
    coupling kinds across `draws` random parameter draws."""
    frame_shape = (4, 4, 3)
    dim = int(np.prod(frame_shape))
    worst = 0.0
    for kind in ("additive", "affine"):
        for draw in range(draws):
            rng = np.random.default_rng(seed * 1000 + draw)
            model = encoder.build_flow_model(2, 2, 8, frame_shape, kind,
                                             rng, np.float64)
            _randomize_flow(model, rng)
            x = rng.random(dim)
            _, analytic = _encode_flat(x, model, frame_shape)
            jac = np.empty((dim, dim))
            for j in range(dim):
                xp, xm = x.copy(), x.copy()
                xp[j] += fd_step
                xm[j] -= fd_step
                zp, _ = _encode_flat(xp, model, frame_shape)
                zm, _ = _encode_flat(xm, model, frame_shape)
                jac[:, j] = (zp - zm) / (2 * fd_step)
            _, numeric = np.linalg.slogdet(jac)
            worst = max(worst, abs(analytic - numeric))
    return SuiteResult("logdet", worst <= tol,
                       f"max |analytic - numeric| = {worst:.2e} nats (tol {tol})")


def _tiny_config():
    return TrainConfig(
        batch_size=2, total_steps=10, warmup_steps=0, decay_steps=0,
        context_len=1, patch_len=2, history_len=1, precision="float64",
        levels=1, steps_per_level=2, coupling_width=8,
        frame_height=4, frame_width=4, frame_channels=1,
        prior_blocks=1, prior_channels=4, seed=7)


def gradient_suite(tol=1e-3, fd_step=1e-5, seed=3):
    """Backward-pass nll gradient vs central finite differences for every
    parameter tensor of a tiny 64-bit model."""
    cfg = _tiny_config()
    rng = np.random.default_rng(seed)
    model, net = training.build_models(cfg)
    _randomize_flow(model, rng, scale=0.2)
    for p in net.parameters().values():
        p.value = p.value + (0.05 * rng.standard_normal(p.value.shape))
    x = rng.random((cfg.batch_size, cfg.patch_len) + cfg.frame_shape)

    def loss_value():
        nll = training.nll_from_dequantized(x, model, net, cfg.context_len)
        return ad.mean(nll)

    grads = ad.backward(loss_value())
    params = dict(model.parameters())
    params.update(net.parameters())
    worst_name, worst = "", 0.0
    for name, p in params.items():
        fd = np.empty_like(p.value)
        flat = p.value.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + fd_step
            up = float(loss_value().value)
            flat[i] = orig - fd_step
            down = float(loss_value().value)
            flat[i] = orig
            fd.ravel()[i] = (up - down) / (2 * fd_step)
        ga = grads[name]
        err = np.linalg.norm(ga - fd) / max(np.linalg.norm(fd), 1e-10)
        if err > worst:
            worst_name, worst = name, err
    return SuiteResult("gradient", worst <= tol,
                       f"worst tensor {worst_name!r} rel err {worst:.2e} (tol {tol})")


def round_trip_suite(n_frames=100, tol=1e-4, seed=5):
    """decode(encode(x)) at 32-bit on the full working geometry."""
    rng = np.random.default_rng(seed)
    model = encoder.build_flow_model(2, 4, 32, (16, 16, 3), "affine",
                                     rng, np.float32)
    x = rng.random((n_frames, 16, 16, 3)).astype(np.float32)
    stack = encoder.encode_frame(Node(x), model, training=True)
    back = encoder.decode_frame(stack, model)
    err = float(np.max(np.abs(back.value - x)))
    return SuiteResult("round_trip", err <= tol,
                       f"max |decode(encode(x)) - x| = {err:.2e} (tol {tol})")


def storage_suite(seed=9):
    """Dataset, checkpoint, and PPM files survive a write/read round trip
    bit-exactly."""
    rng = np.random.default_rng(seed)
    ds = datasets.gen_stochastic_movement(3, 5, 16, 16, seed=seed, speed=0.5)
    cfg = _tiny_config()
    model, net = training.build_models(cfg)
    toy = rng.integers(0, 256, size=(3, 2) + cfg.frame_shape).astype(np.uint8)
    _, _, opt, _ = training.train(toy, cfg, None, model, net)
    with tempfile.TemporaryDirectory() as tmp:
        dpath = os.path.join(tmp, "d.vfd")
        storage.write_dataset(dpath, ds.videos)
        ds_ok = np.array_equal(storage.read_dataset(dpath).videos, ds.videos)
        cpath = os.path.join(tmp, "c.vfck")
        storage.save_checkpoint(cpath, model, net, opt, cfg)
        m2, n2, _, _ = storage.load_checkpoint(cpath)
        ck_ok = all(np.array_equal(p.value, model.parameters()[k].value)
                    for k, p in m2.parameters().items())
        ck_ok = ck_ok and all(np.array_equal(p.value, net.parameters()[k].value)
                              for k, p in n2.parameters().items())
        frame = rng.integers(0, 256, size=(1, 8, 8, 3)).astype(np.uint8)
        paths = storage.export_frames(frame, tmp, prefix="v")
        ppm_ok = np.array_equal(storage.read_ppm(paths[0]), frame[0])
    ok = ds_ok and ck_ok and ppm_ok
    return SuiteResult("storage", ok,
                       f"dataset={ds_ok} checkpoint={ck_ok} ppm={ppm_ok}")


def run_all(out=None):
    """Run every suite; returns the list of SuiteResult. Prints one line per
    suite to `out` (default stdout) as it goes."""
    results = []
    for suite in (logdet_suite, gradient_suite, round_trip_suite, storage_suite):
        r = suite()
        results.append(r)
        print(str(r), file=out, flush=True)
    return results
