"""Spline control paths and the controlled-differential-equation model.

The encoder evolves a latent state along a natural-cubic-spline interpolation
of the observed history (dz = f_theta(z) dX/ds); the decoder rolls the state
forward along a planned treatment path; two small heads read out normalized
tumor volume and observation probability.

All spline arithmetic happens in raw day units (integer knots, stage times at
multiples of dt/2) so grid alignment is exact in floating point; physical
scaling lives in the channel values (time / time_scale, volume / vol_scale).
Splines are represented as basis matrices: the natural-spline second
derivatives are linear in the knot values (tridiagonal system), so values and
derivatives at any query times are `basis @ knot_values`, which keeps the
control derivative a constant array that gradients never need to enter.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .gradcore import (
    MLPSpec,
    ParamStore,
    Tensor,
    concat,
    const,
    init_mlp,
    mlp_apply,
    mlp_field_step,
    rk4_axpy,
    rk4_combine,
    stop_gradient,
)

DEC_CHANNELS = 3  # normalized time, chemo indicator, radio indicator


class CdeError(ValueError):
    """Raised for malformed control paths, configs, or window batches."""


# ---------------------------------------------------------------------------
# Natural cubic splines as basis matrices
# ---------------------------------------------------------------------------

def natural_spline_basis(knot_times, query_times):
    """Basis matrices for a natural cubic spline through the given knots.

    Returns (value_basis, deriv_basis), each of shape (n_query, n_knots),
    such that `value_basis @ y` interpolates knot values y at the query
    times and `deriv_basis @ y` is the first derivative there.  Outside the
    knot range the path extends as a constant (derivative 0); at the boundary
    knots themselves the one-sided interior derivative is used so that
    integration over the full knot span sees a smooth control.  A single knot
    yields a constant path with zero derivative everywhere.
    """
    t = np.asarray(knot_times, dtype=np.float64)
    q = np.asarray(query_times, dtype=np.float64)
    if t.ndim != 1 or t.size == 0:
        raise CdeError("spline needs at least one knot")
    if not np.all(np.isfinite(t)) or not np.all(np.isfinite(q)):
        raise CdeError("spline times must be finite")
    if t.size > 1 and not np.all(np.diff(t) > 0):
        raise CdeError("knot times must be strictly increasing")

    n, m = t.size, q.size
    value_basis = np.zeros((m, n))
    deriv_basis = np.zeros((m, n))
    if n == 1:
        value_basis[:, 0] = 1.0
        return value_basis, deriv_basis

    # Second-derivative extraction: M = curvature @ y, natural ends M_0=M_{n-1}=0.
    curvature = np.zeros((n, n))
    if n > 2:
        h = np.diff(t)
        lhs = np.zeros((n - 2, n - 2))
        rhs = np.zeros((n - 2, n))
        for j in range(n - 2):
            i = j + 1
            lhs[j, j] = (h[i - 1] + h[i]) / 3.0
            if j > 0:
                lhs[j, j - 1] = h[i - 1] / 6.0
            if j < n - 3:
                lhs[j, j + 1] = h[i] / 6.0
            rhs[j, i - 1] = 1.0 / h[i - 1]
            rhs[j, i] = -1.0 / h[i - 1] - 1.0 / h[i]
            rhs[j, i + 1] = 1.0 / h[i]
        curvature[1:-1] = np.linalg.solve(lhs, rhs)

    value_basis[q < t[0], 0] = 1.0
    value_basis[q > t[-1], n - 1] = 1.0

    inside = (q >= t[0]) & (q <= t[-1])
    rows = np.nonzero(inside)[0]
    if rows.size:
        qi = q[inside]
        idx = np.clip(np.searchsorted(t, qi, side="right") - 1, 0, n - 2)
        seg = t[idx + 1] - t[idx]
        left = t[idx + 1] - qi
        right = qi - t[idx]
        value_basis[rows, idx] += left / seg
        value_basis[rows, idx + 1] += right / seg
        cl = left**3 / (6.0 * seg) - seg * left / 6.0
        cr = right**3 / (6.0 * seg) - seg * right / 6.0
        value_basis[rows] += cl[:, None] * curvature[idx] + cr[:, None] * curvature[idx + 1]

        deriv_basis[rows, idx] -= 1.0 / seg
        deriv_basis[rows, idx + 1] += 1.0 / seg
        dl = -(left**2) / (2.0 * seg) + seg / 6.0
        dr = right**2 / (2.0 * seg) - seg / 6.0
        deriv_basis[rows] += dl[:, None] * curvature[idx] + dr[:, None] * curvature[idx + 1]
    return value_basis, deriv_basis


def rk4_stage_times(t0: float, n_steps: int, dt: float) -> np.ndarray:
    """All distinct evaluation times used by n_steps of classical RK4."""
    return t0 + (dt / 2.0) * np.arange(2 * n_steps + 1)


# ---------------------------------------------------------------------------
# Model configuration and parameter blocks
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ModelConfig:
    """Architecture and solver settings for encoder/decoder/heads."""

    latent_dim: int = 32
    hidden: int = 8
    embed_layers: int = 1
    encoder_layers: int = 3
    decoder_layers: int = 2
    head_layers: int = 1
    dt_solve: float = 0.25
    lookback: int = 7
    horizon: int = 5
    n_static: int = 0
    observed_flag: bool = True
    with_intensity_head: bool = True

    def __post_init__(self):
        if self.latent_dim < 1 or self.hidden < 1:
            raise CdeError("latent_dim and hidden must be positive")
        if self.lookback < 1 or self.horizon < 1:
            raise CdeError("lookback and horizon must be positive")
        if not (0 < self.dt_solve <= 1):
            raise CdeError("dt_solve must lie in (0, 1]")
        spd = round(1.0 / self.dt_solve)
        if abs(spd * self.dt_solve - 1.0) > 1e-12:
            raise CdeError("dt_solve must divide one day evenly")

    @property
    def steps_per_day(self) -> int:
        return round(1.0 / self.dt_solve)

    @property
    def n_channels(self) -> int:
        # time, chemo, radio, volume (+ observed flag, + static covariates)
        return 4 + int(self.observed_flag) + self.n_static

    def block_specs(self) -> dict:
        specs = {
            "embed": MLPSpec(self.n_channels, self.latent_dim, self.hidden, self.embed_layers),
            "encoder_field": MLPSpec(
                self.latent_dim, self.latent_dim * self.n_channels,
                self.hidden, self.encoder_layers, final="tanh",
            ),
            "decoder_field": MLPSpec(
                self.latent_dim, self.latent_dim * DEC_CHANNELS,
                self.hidden, self.decoder_layers, final="tanh",
            ),
            "outcome_head": MLPSpec(self.latent_dim, 1, self.hidden, self.head_layers),
        }
        if self.with_intensity_head:
            specs["intensity_head"] = MLPSpec(
                self.latent_dim, 1, self.hidden, self.head_layers, final="sigmoid"
            )
        return specs


def init_model(cfg: ModelConfig, seed: int) -> ParamStore:
    """Fresh parameters; block draw order is fixed so that configurations
    sharing a seed share the values of their common blocks."""
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    store = ParamStore()
    for name in ("embed", "encoder_field", "decoder_field", "outcome_head", "intensity_head"):
        spec = cfg.block_specs().get(name)
        if spec is not None:
            init_mlp(store, name, spec, rng)
    return store


# ---------------------------------------------------------------------------
# Window batches: spline work precomputed into constant arrays
# ---------------------------------------------------------------------------

@dataclass
class WindowBatch:
    """Everything the model needs for a set of forecast windows, as plain
    float64 arrays. dx arrays hold control derivatives at RK4 stage times."""

    g_in: np.ndarray      # (N, C) control value at window start
    enc_dx: np.ndarray    # (N, 2*enc_steps+1, C)
    dec_dx: np.ndarray    # (N, 2*dec_steps+1, 3)
    targets: np.ndarray   # (N, horizon) normalized volumes, 0 where off-grid
    dn: np.ndarray        # (N, horizon) 1 where the day was actually observed
    grid: np.ndarray      # (N, horizon) 1 where the day exists in the record
    lam: np.ndarray       # (N, horizon) true intensity, 0 where off-grid
    index: list           # (patient_id, origin, arm) per row

    @property
    def size(self) -> int:
        return self.g_in.shape[0]

    def take(self, rows) -> "WindowBatch":
        rows = np.asarray(rows)
        return WindowBatch(
            g_in=self.g_in[rows], enc_dx=self.enc_dx[rows], dec_dx=self.dec_dx[rows],
            targets=self.targets[rows], dn=self.dn[rows], grid=self.grid[rows],
            lam=self.lam[rows], index=[self.index[i] for i in rows],
        )


def _encoder_knots(window, cfg: ModelConfig, vol_scale: float, time_scale: float):
    """Knot times and per-knot channel values for one window's history path.

    Knots sit at observed days, treatment days, and the forecast origin; the
    volume channel is forward-filled at non-observed knots (back-filled before
    the first observation) and the flag channel marks real observations.
    """
    t0 = window.origin - cfg.lookback
    if window.obs_times.size == 0:
        raise CdeError("window has no observed history")
    days = np.arange(t0, window.origin + 1)
    treated = (window.treat_chemo > 0) | (window.treat_radio > 0)
    knot_days = sorted(set(window.obs_times.tolist()) | set(days[treated].tolist()) | {window.origin})
    observed_at = dict(zip(window.obs_times.tolist(), window.obs_y.tolist()))

    values = np.zeros((len(knot_days), cfg.n_channels))
    first_y = window.obs_y[0]
    last_y = first_y  # back-fill before the first observation
    for i, day in enumerate(knot_days):
        col = 0
        values[i, col] = day / time_scale
        col += 1
        values[i, col] = window.treat_chemo[day - t0]
        col += 1
        values[i, col] = window.treat_radio[day - t0]
        col += 1
        if day in observed_at:
            last_y = observed_at[day]
            flag = 1.0
        else:
            flag = 0.0
        values[i, col] = last_y / vol_scale
        col += 1
        if cfg.observed_flag:
            values[i, col] = flag
            col += 1
        if cfg.n_static:
            values[i, col:] = window.x_static
    return np.asarray(knot_days, dtype=np.float64), values


_ENC_BASIS_CACHE: dict = {}


def _encoder_basis(knots: np.ndarray, t0: int, n_steps: int, dt: float):
    """(value row at t0, derivative basis at stage times) for an encoder knot
    layout, cached by the knots' offsets from the window start — layouts
    repeat heavily across windows and the bases are shift-invariant."""
    key = (tuple(int(k - t0) for k in knots), n_steps, dt)
    hit = _ENC_BASIS_CACHE.get(key)
    if hit is None:
        rel = np.asarray(key[0], dtype=np.float64)
        v_basis, _ = natural_spline_basis(rel, np.array([0.0]))
        _, d_basis = natural_spline_basis(rel, rk4_stage_times(0.0, n_steps, dt))
        hit = (v_basis[0], d_basis)
        if len(_ENC_BASIS_CACHE) < 4096:
            _ENC_BASIS_CACHE[key] = hit
    return hit


_DEC_BASIS_CACHE: dict = {}


def _decoder_deriv_basis(horizon: int, dt: float) -> np.ndarray:
    """Derivative basis for the plan path: knots at horizon+1 consecutive
    integer days, queried at the decoder's RK4 stage times (shift-invariant,
    so it is computed once per (horizon, dt))."""
    key = (horizon, dt)
    if key not in _DEC_BASIS_CACHE:
        knots = np.arange(horizon + 1, dtype=np.float64)
        queries = rk4_stage_times(0.0, round(horizon / dt), dt)
        _, deriv = natural_spline_basis(knots, queries)
        _DEC_BASIS_CACHE[key] = deriv
    return _DEC_BASIS_CACHE[key]


def prepare(
    windows: Iterable,
    cfg: ModelConfig,
    vol_scale: float,
    time_scale: float,
    arm: str | None = None,
) -> WindowBatch:
    """Turn forecast windows into a WindowBatch under one treatment plan.

    arm=None uses each window's factual arm; otherwise every window is rolled
    out under the named plan (which must be present on the window).
    """
    windows = list(windows)
    if not windows:
        raise CdeError("prepare() needs at least one window")
    n = len(windows)
    hz = cfg.horizon
    enc_steps = cfg.lookback * cfg.steps_per_day
    dec_deriv = _decoder_deriv_basis(hz, cfg.dt_solve)

    g_in = np.zeros((n, cfg.n_channels))
    enc_dx = np.zeros((n, 2 * enc_steps + 1, cfg.n_channels))
    dec_dx = np.zeros((n, dec_deriv.shape[0], DEC_CHANNELS))
    targets = np.zeros((n, hz))
    dn = np.zeros((n, hz))
    grid = np.zeros((n, hz))
    lam = np.zeros((n, hz))
    index = []

    for i, w in enumerate(windows):
        use_arm = arm if arm is not None else w.arm
        if use_arm not in w.plans:
            raise CdeError(f"window lacks a plan for arm {use_arm!r}")
        if cfg.n_static and w.x_static is None:
            raise CdeError("config expects static covariates but window has none")

        knots, vals = _encoder_knots(w, cfg, vol_scale, time_scale)
        t0 = w.origin - cfg.lookback
        v_row, d_basis = _encoder_basis(knots, t0, enc_steps, cfg.dt_solve)
        g_in[i] = v_row @ vals
        enc_dx[i] = d_basis @ vals

        chemo, radio = w.plans[use_arm]
        plan_vals = np.column_stack([
            (w.origin + np.arange(hz + 1)) / time_scale,
            chemo.astype(np.float64),
            radio.astype(np.float64),
        ])
        dec_dx[i] = dec_deriv @ plan_vals

        tgt = w.targets[use_arm]
        on = np.asarray(w.grid_mask, dtype=np.float64)
        targets[i] = np.where(on > 0, np.nan_to_num(tgt / vol_scale), 0.0)
        dn[i] = w.dn
        grid[i] = on
        lam[i] = np.where(on > 0, np.nan_to_num(w.lambda_true), 0.0)
        index.append((w.patient_id, w.origin, use_arm))

    return WindowBatch(g_in, enc_dx, dec_dx, targets, dn, grid, lam, index)


# ---------------------------------------------------------------------------
# CDE integration and heads
# ---------------------------------------------------------------------------

def _rk4_roll(params, prefix: str, spec: MLPSpec, latent_dim: int,
              z: Tensor, dx_stages: np.ndarray, dt: float, capture=()):
    """Classical RK4 for dz = F(z) dX/ds with F from an MLP field.

    dx_stages holds dX/ds at times t0 + k*dt/2 (shape (N, 2*steps+1, C));
    returns the final state and the states captured after the listed steps.
    """
    if dx_stages.ndim != 3 or dx_stages.shape[1] % 2 == 0:
        raise CdeError("dx_stages must be (N, 2*steps+1, C)")
    n_steps = (dx_stages.shape[1] - 1) // 2
    captured = []
    for k in range(n_steps):
        d0 = dx_stages[:, 2 * k]
        dm = dx_stages[:, 2 * k + 1]
        d1 = dx_stages[:, 2 * k + 2]
        k1 = mlp_field_step(params, prefix, spec, z, d0, latent_dim)
        k2 = mlp_field_step(params, prefix, spec, rk4_axpy(z, k1, dt / 2), dm, latent_dim)
        k3 = mlp_field_step(params, prefix, spec, rk4_axpy(z, k2, dt / 2), dm, latent_dim)
        k4 = mlp_field_step(params, prefix, spec, rk4_axpy(z, k3, dt), d1, latent_dim)
        z = rk4_combine(z, k1, k2, k3, k4, dt)
        if (k + 1) in capture:
            captured.append(z)
    return z, captured


def encode_batch(params: dict, cfg: ModelConfig, g_in: np.ndarray,
                 enc_dx: np.ndarray, dt: float | None = None) -> Tensor:
    """Embed the initial control value and integrate over the history span."""
    specs = cfg.block_specs()
    z0 = mlp_apply(params, "embed", specs["embed"], const(g_in))
    z, _ = _rk4_roll(params, "encoder_field", specs["encoder_field"],
                     cfg.latent_dim, z0, enc_dx, dt if dt is not None else cfg.dt_solve)
    return z


def decode_batch(params: dict, cfg: ModelConfig, z: Tensor,
                 dec_dx: np.ndarray, dt: float | None = None) -> list:
    """Roll the encoded state along the plan path; returns the latent state
    at each whole forecast day (tau = 1..horizon)."""
    dt = dt if dt is not None else cfg.dt_solve
    spd = round(1.0 / dt)
    capture = {d * spd for d in range(1, cfg.horizon + 1)}
    specs = cfg.block_specs()
    _, captured = _rk4_roll(params, "decoder_field", specs["decoder_field"],
                            cfg.latent_dim, z, dec_dx, dt, capture)
    if len(captured) != cfg.horizon:
        raise CdeError("decoder steps do not cover the forecast horizon")
    return captured


def predict(params: dict, cfg: ModelConfig, batch: WindowBatch,
            detach_intensity: bool = False):
    """Full forward pass: returns (y_hat, lambda_hat) as (N, horizon) Tensors
    on the normalized scale; lambda_hat is None without an intensity head.

    detach_intensity feeds the intensity head stopped-gradient copies of the
    latents, so its loss can only ever update the head's own parameters."""
    z = encode_batch(params, cfg, batch.g_in, batch.enc_dx)
    latents = decode_batch(params, cfg, z, batch.dec_dx)
    specs = cfg.block_specs()
    y_hat = concat([mlp_apply(params, "outcome_head", specs["outcome_head"], zz)
                    for zz in latents], axis=1)
    lam_hat = None
    if "intensity_head.w0" in params:
        spec = MLPSpec(cfg.latent_dim, 1, cfg.hidden, cfg.head_layers, final="sigmoid")
        zs = [stop_gradient(zz) for zz in latents] if detach_intensity else latents
        lam_hat = concat([mlp_apply(params, "intensity_head", spec, zz)
                          for zz in zs], axis=1)
    return y_hat, lam_hat
