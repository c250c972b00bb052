"""Residual checks of a flow together with its extension data.

Momentum residuals are judged after Leray projection, since any gradient
part is absorbed by the pressure.  Slot fields are evaluated in closed form
(see :mod:`eulerext.extender`), so the only discretization errors are the
spectral derivatives of the flow and of the label displacement and the
fourth-order time differences.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .extender import ExtensionData
from .fields import time_derivative
from .flowgen import Flow
from .forcing import material_force
from .geometry import divergence, leray_project, lower

TOL_MOMENTUM = 1e-3
TOL_TRANSPORT = 1e-5
TOL_VOLUME = 1e-12


def _frame_sup(a: np.ndarray) -> np.ndarray:
    """Sup over everything except the leading frame axis."""
    return np.abs(a.reshape(a.shape[0], -1)).max(axis=1)


def _frame_l2(a: np.ndarray, d: int) -> np.ndarray:
    """Root-mean-square of the component norm per frame."""
    flat = a.reshape(a.shape[0], a.shape[1] if a.ndim > d + 1 else 1, -1)
    return np.sqrt((flat ** 2).sum(axis=1).mean(axis=1))


def _check_compatible(flow: Flow, ext: ExtensionData):
    if flow.grid.n != ext.grid.n or len(flow.times) != len(ext.times) \
            or not np.allclose(flow.times, ext.times):
        raise ValueError("flow and extension live on different grids or time partitions")


def verify_incompressible(flow: Flow) -> float:
    """``max |div_g u|`` over frames and nodes."""
    return flow.max_divergence()


def verify_volume_condition(ext: ExtensionData) -> float:
    """``max |prod_s g~_ss - 1|`` with ``g~_ss = 1 / g~^ss``."""
    if ext.m == 0:
        return 0.0
    prod = np.ones(ext.grid.n)
    for s in range(ext.m):
        prod = prod / ext.g_upper(s)
    return float(np.abs(prod - 1.0).max())


def positivity_failures(ext: ExtensionData) -> list[str]:
    """Slots whose ``g~^ss`` or ``rho_s`` fail to be strictly positive."""
    out = []
    for s, sl in enumerate(ext.slots):
        g = ext.g_upper(s)
        if not np.all(g > 0):
            out.append(f"{ext.describe(s)}: g^ss not positive (min {g.min():.4g})")
        if not sl.closure:
            r = ext.rho(s)
            if not np.all(r > 0):
                out.append(f"{ext.describe(s)}: rho not positive (min {r.min():.4g})")
    return out


def label_transport(flow: Flow, ext: ExtensionData) -> np.ndarray:
    """``d_t A + u^j d_j A`` per frame, ``(m, d, *n)``."""
    dt = time_derivative(ext.displacement, ext.times)
    J = ext.label_jacobian()
    return dt + np.einsum("mj...,mbj...->mb...", flow.velocity, J)


def transport_residuals(flow: Flow, ext: ExtensionData) -> np.ndarray:
    """Sup over frames and nodes of ``d_t rho_s + u^j d_j rho_s`` per forcing slot.

    By the chain rule this equals ``grad_a profile(A) . (d_t A + u . grad A)``.
    """
    RA = label_transport(flow, ext)
    out = np.zeros(ext.m)
    for s, sl in enumerate(ext.slots):
        if sl.closure:
            continue
        ga = ext.rho_label_gradient(s)
        out[s] = float(np.abs((ga * RA).sum(axis=1)).max())
    return out


@dataclass
class ResidualReport:
    """Per-frame momentum residuals (projected and raw) and per-slot transport residuals."""

    name: str
    times: np.ndarray
    projected_sup: np.ndarray
    projected_l2: np.ndarray
    raw_sup: np.ndarray
    transport: np.ndarray
    tol_momentum: float
    tol_transport: float
    projected: np.ndarray = field(repr=False, default=None)

    @property
    def momentum(self) -> float:
        return float(self.projected_sup.max()) if len(self.projected_sup) else 0.0

    @property
    def transport_max(self) -> float:
        return float(self.transport.max()) if len(self.transport) else 0.0

    @property
    def passed(self) -> bool:
        return self.momentum <= self.tol_momentum and self.transport_max <= self.tol_transport

    def summary(self) -> str:
        return (f"{self.name}: projected momentum {self.momentum:.3e} (tol {self.tol_momentum:.1e}), "
                f"transport {self.transport_max:.3e} (tol {self.tol_transport:.1e}) -> "
                f"{'pass' if self.passed else 'fail'}")


def _momentum_terms(flow: Flow):
    """``d_t u_i + u^j nabla_j u_i`` per frame."""
    return -material_force(flow)


def boussinesq_residual(flow: Flow, ext: ExtensionData) -> np.ndarray:
    """Raw ``d_t u_i + u^j nabla_j u_i + sum_s rho_s d_i g~^ss``."""
    return _momentum_terms(flow) + ext.buoyancy()


def reduced_residual(flow: Flow, ext: ExtensionData) -> np.ndarray:
    """Raw ``d_t u_i + u^j nabla_j u_i - u^j nabla_i u_j - sum_s g~^ss u~_s d_i u~_s``."""
    metric = flow.metric
    grid = flow.grid
    d = grid.d
    u = flow.velocity
    w = lower(metric, u)
    dw = grid.gradient(w)  # (m, j, i, *n) = d_i w_j
    # u^j nabla_i u_j = u^j (d_i w_j - Gamma^k_ij w_k)
    back = np.einsum("mj...,mji...->mi...", u, dw)
    if not metric.is_flat:
        back = back - np.einsum("kij...,mk...,mj...->mi...", metric.christoffel, w, u)
    r = _momentum_terms(flow) - back
    for s, sl in enumerate(ext.slots):
        if sl.closure:
            continue
        ut = ext.swirl_lower(s)
        dut = ext.rho_gradient(s) / ut[:, None]
        r = r - ext.g_upper(s)[None, None] * ut[:, None] * dut
    return r


def _report(name, flow, raw, transport, tol_m, tol_t):
    proj, _ = leray_project(flow.metric, raw)
    d = flow.grid.d
    return ResidualReport(name, flow.times, _frame_sup(proj), _frame_l2(proj, d), _frame_sup(raw),
                          transport, tol_m, tol_t, proj)


def verify_boussinesq_form(flow: Flow, ext: ExtensionData, tol_momentum: float = TOL_MOMENTUM,
                           tol_transport: float = TOL_TRANSPORT) -> ResidualReport:
    """Momentum and transport residuals of the Boussinesq-type form."""
    _check_compatible(flow, ext)
    return _report("boussinesq form", flow, boussinesq_residual(flow, ext),
                   transport_residuals(flow, ext), tol_momentum, tol_transport)


def verify_reduced_system(flow: Flow, ext: ExtensionData, tol_momentum: float = TOL_MOMENTUM,
                          tol_transport: float = TOL_TRANSPORT) -> ResidualReport:
    """Residuals in the swirl variables ``u~_s = sqrt(2 rho_s)``.

    The transport entry per slot is ``sup |d_t u~_s + u . grad u~_s|``, which
    is the ``rho`` transport residual divided by ``u~_s``.
    """
    _check_compatible(flow, ext)
    RA = label_transport(flow, ext)
    trans = np.zeros(ext.m)
    for s, sl in enumerate(ext.slots):
        if sl.closure:
            continue
        ga = ext.rho_label_gradient(s)
        trans[s] = float(np.abs((ga * RA).sum(axis=1) / ext.swirl_lower(s)).max())
    return _report("reduced system", flow, reduced_residual(flow, ext), trans, tol_momentum,
                   tol_transport)


def chain_gap(a: ResidualReport, b: ResidualReport) -> float:
    """``max |P r_a - P r_b|``: agreement of two momentum residuals up to a gradient."""
    return float(np.abs(a.projected - b.projected).max())


def pressure_gap(flow: Flow, ext: ExtensionData) -> float:
    """``max |r + grad p''' - P r|``: how well the stored pressure absorbs the gradient part."""
    raw = boussinesq_residual(flow, ext)
    proj, _ = leray_project(flow.metric, raw)
    return float(np.abs(raw + flow.grid.gradient(ext.pressure) - proj).max())


@dataclass
class EnergyReport:
    times: np.ndarray
    horizontal: np.ndarray
    vertical: np.ndarray

    @property
    def total(self) -> np.ndarray:
        return self.horizontal + self.vertical

    @property
    def drift(self) -> float:
        return float(np.abs(self.total - self.total[0]).max())

    @property
    def horizontal_variation(self) -> float:
        return float(self.horizontal.max() - self.horizontal.min())


def energy_report(flow: Flow, ext: ExtensionData | None = None) -> EnergyReport:
    """Horizontal ``1/2 int |u|_g^2 dg`` and vertical ``sum_s int g~^ss rho_s dg`` per frame."""
    grid = flow.grid
    sg = flow.metric.sqrt_det
    u = flow.velocity
    w = lower(flow.metric, u)
    horiz = np.array([grid.integrate(0.5 * (u[j] * w[j]).sum(axis=0) * sg) for j in range(len(u))])
    vert = np.zeros(len(u))
    if ext is not None:
        _check_compatible(flow, ext)
        for s, sl in enumerate(ext.slots):
            if sl.closure:
                continue
            dens = ext.g_upper(s)[None] * ext.rho(s) * sg[None]
            vert += np.array([grid.integrate(f) for f in dens])
    return EnergyReport(flow.times, horiz, vert)


@dataclass
class Certificate:
    """Combined verdict on a (flow, extension) pair."""

    boussinesq: ResidualReport
    reduced: ResidualReport
    chain: float
    volume: float
    incompressibility: float
    positivity: list[str]
    worst_transport_slot: str
    tol_volume: float = TOL_VOLUME
    tol_chain: float = 1e-8
    tol_divergence: float = 1e-8

    @property
    def failures(self) -> list[str]:
        out = []
        if self.boussinesq.momentum > self.boussinesq.tol_momentum:
            out.append(f"projected momentum residual {self.boussinesq.momentum:.3e} exceeds "
                       f"{self.boussinesq.tol_momentum:.1e}")
        if self.boussinesq.transport_max > self.boussinesq.tol_transport:
            out.append(f"transport residual {self.boussinesq.transport_max:.3e} exceeds "
                       f"{self.boussinesq.tol_transport:.1e} at {self.worst_transport_slot}")
        if self.volume > self.tol_volume:
            out.append(f"volume condition violated by {self.volume:.3e}")
        if self.chain > self.tol_chain:
            out.append(f"reduced and Boussinesq residuals differ by {self.chain:.3e}")
        if self.incompressibility > self.tol_divergence:
            out.append(f"flow divergence {self.incompressibility:.3e}")
        out.extend(self.positivity)
        return out

    @property
    def passed(self) -> bool:
        return not self.failures

    def summary(self) -> str:
        lines = [self.boussinesq.summary(), self.reduced.summary(),
                 f"chain gap: {self.chain:.3e}", f"volume defect: {self.volume:.3e}",
                 f"max divergence: {self.incompressibility:.3e}"]
        lines += [f"FAIL: {f}" for f in self.failures]
        lines.append("verify: " + ("pass" if self.passed else "fail"))
        return "\n".join(lines)


def verify_extension(flow: Flow, ext: ExtensionData, tol_momentum: float = TOL_MOMENTUM,
                     tol_transport: float = TOL_TRANSPORT, tol_volume: float = TOL_VOLUME) -> Certificate:
    """All checks at once; positivity is tested before the swirl variables are formed."""
    pos = positivity_failures(ext)
    bous = verify_boussinesq_form(flow, ext, tol_momentum, tol_transport)
    worst = "-"
    if ext.m and bous.transport.size and bous.transport_max > 0:
        worst = ext.describe(int(np.argmax(bous.transport)))
    if pos:
        # square roots of nonpositive swirl fields are undefined; report only the Boussinesq form
        red = ResidualReport("reduced system", flow.times, np.full(len(flow.times), np.inf),
                             np.full(len(flow.times), np.inf), np.full(len(flow.times), np.inf),
                             np.zeros(ext.m), tol_momentum, tol_transport, None)
        chain = float("inf")
    else:
        red = verify_reduced_system(flow, ext, tol_momentum, tol_transport)
        chain = chain_gap(bous, red)
    return Certificate(bous, red, chain, verify_volume_condition(ext), verify_incompressible(flow),
                       pos, worst, tol_volume)


def write_report_csv(path, cert: Certificate) -> None:
    """Per-frame residual columns."""
    b, r = cert.boussinesq, cert.reduced
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["t", "projected_sup", "projected_l2", "raw_sup", "reduced_projected_sup"])
        for j, t in enumerate(b.times):
            wr.writerow([f"{t:.17g}", f"{b.projected_sup[j]:.17g}", f"{b.projected_l2[j]:.17g}",
                         f"{b.raw_sup[j]:.17g}", f"{r.projected_sup[j]:.17g}"])
