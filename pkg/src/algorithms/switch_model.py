"""Physics of the two-mode cavity containing a lambda emitter.

The emitter has ground states |G⟩, |H⟩ and excited state |E⟩. Cavity mode ``a``
couples |H⟩-|E⟩ (strength g_a), mode ``b`` couples |G⟩-|E⟩ (strength g_b).
Mode ``a`` carries the control drive E_a, mode ``b`` the signal drive E_b and,
for the set-reset relay, a second control field E_c detuned by Ω from the
signal. Everything is written in the rotating frame of the drives and in units
of γ_b.
"""
import logging
import math
from dataclasses import asdict, dataclass, fields, replace
from functools import lru_cache

import numpy as np

from core.errors import InvalidArgumentError
from core.operators import (
    LEVEL_INDEX,
    Operator,
    SpaceLayout,
    StateVector,
    annihilation,
    coherent_state,
    embed,
    product_state,
    transition,
)

logger = logging.getLogger(__name__)

G, H, E = LEVEL_INDEX["G"], LEVEL_INDEX["H"], LEVEL_INDEX["E"]

# Fields that carry units of γ_b and are rescaled when γ_b != 1 is given.
_RATE_FIELDS = (
    "g_a", "g_b", "kappa_a", "kappa_b", "gamma_a", "gamma_b",
    "theta_a", "theta_b", "delta_cap", "delta_small",
    "eps_a", "eps_b", "eps_c", "omega_cap",
)
_NONNEGATIVE = ("g_a", "g_b", "kappa_a", "kappa_b", "gamma_a", "eps_a", "eps_b", "eps_c")
_FRACTIONS = (
    ("kappa_a_in_frac", "kappa_a_out_frac"),
    ("kappa_b_in_frac", "kappa_b_out_frac"),
)


@dataclass(frozen=True)
class SwitchParams:
    """All physical parameters of the switch, in units of γ_b.

    Drive strengths follow E_i = α_i sqrt(2 κ_i,in), where |α_i|² is the photon
    flux of the incident beam. The constructor normalises γ_b to 1 by dividing
    every rate, detuning and drive strength by the supplied γ_b.

    Attributes:
        g_a, g_b (float): Emitter-cavity couplings of modes a and b.
        kappa_a, kappa_b (float): Half cavity decay rates.
        kappa_*_in_frac, kappa_*_out_frac (float): Share of κ leaving through the
            input / output mirror; the remainder (if any) is scattering loss.
        gamma_a, gamma_b (float): Half spontaneous-emission rates E→H and E→G.
        theta_a, theta_b (float): Drive-cavity detunings Θ_a, Θ_b.
        delta_cap (float): Δ, excited-state detuning.
        delta_small (float): δ, ground-state splitting term.
        eps_a, eps_b, eps_c (float): Drive strengths of the a-drive, the signal
            and the c-field.
        omega_cap (float): Ω = ω_c - ω_b.
        n_a, n_b (int): Fock cutoffs of modes a and b.
    """

    g_a: float
    g_b: float
    kappa_a: float
    kappa_b: float
    gamma_a: float
    theta_a: float
    delta_cap: float
    delta_small: float
    eps_a: float
    eps_b: float
    gamma_b: float = 1.0
    theta_b: float = 0.0
    eps_c: float = 0.0
    omega_cap: float = 0.0
    kappa_a_in_frac: float = 0.5
    kappa_a_out_frac: float = 0.5
    kappa_b_in_frac: float = 0.5
    kappa_b_out_frac: float = 0.5
    n_a: int = 5
    n_b: int = 5

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name in ("n_a", "n_b"):
                if int(value) != value or int(value) < 1:
                    raise InvalidArgumentError(f"{f.name} must be a positive integer, got {value}")
                object.__setattr__(self, f.name, int(value))
            else:
                value = float(value)
                if not math.isfinite(value):
                    raise InvalidArgumentError(f"{f.name} must be finite, got {value}")
                object.__setattr__(self, f.name, value)
        if self.gamma_b <= 0.0:
            raise InvalidArgumentError(f"gamma_b sets the unit and must be > 0, got {self.gamma_b}")
        for name in _NONNEGATIVE:
            if getattr(self, name) < 0.0:
                raise InvalidArgumentError(f"{name} must be >= 0, got {getattr(self, name)}")
        for fin, fout in _FRACTIONS:
            vin, vout = getattr(self, fin), getattr(self, fout)
            if vin < 0.0 or vout < 0.0 or vin + vout > 1.0 + 1e-12:
                raise InvalidArgumentError(
                    f"mirror fractions {fin}={vin} and {fout}={vout} must be >= 0 and sum to <= 1"
                )
        if self.gamma_b != 1.0:
            scale = self.gamma_b
            for name in _RATE_FIELDS:
                object.__setattr__(self, name, getattr(self, name) / scale)
            object.__setattr__(self, "gamma_b", 1.0)

    def replace(self, **changes):
        return replace(self, **changes)

    def with_cutoffs(self, n_a, n_b):
        return replace(self, n_a=n_a, n_b=n_b)

    def to_dict(self):
        return asdict(self)

    @property
    def layout(self):
        return SpaceLayout.switch(self.n_a, self.n_b)

    def kappa(self, mode):
        return self._mode(mode, "kappa_a", "kappa_b")

    def kappa_in(self, mode):
        return self.kappa(mode) * self._mode(mode, "kappa_a_in_frac", "kappa_b_in_frac")

    def kappa_out(self, mode):
        return self.kappa(mode) * self._mode(mode, "kappa_a_out_frac", "kappa_b_out_frac")

    def kappa_loss(self, mode):
        return max(self.kappa(mode) - self.kappa_in(mode) - self.kappa_out(mode), 0.0)

    def cooperativity(self, mode):
        """C = g² / (2 κ γ) for the transition coupled to ``mode``."""
        g = self._mode(mode, "g_a", "g_b")
        gamma = self._mode(mode, "gamma_a", "gamma_b")
        kappa = self.kappa(mode)
        if kappa == 0.0 or gamma == 0.0:
            return math.inf
        return g * g / (2.0 * kappa * gamma)

    def _mode(self, mode, a_name, b_name):
        if mode == "a":
            return getattr(self, a_name)
        if mode == "b":
            return getattr(self, b_name)
        raise InvalidArgumentError(f"mode must be 'a' or 'b', got {mode!r}")


def table1_params(**overrides):
    """Single-control operating point: a-drive at 1/10 the signal power."""
    values = dict(
        eps_a=math.sqrt(0.01), eps_b=math.sqrt(0.1), eps_c=0.0,
        g_a=1.3784, g_b=10.0, omega_cap=0.0,
        theta_a=-0.0915, theta_b=0.0,
        kappa_a=1.0, kappa_b=1.0,
        delta_small=11.5916, delta_cap=2.8520,
        gamma_a=0.2, gamma_b=1.0,
    )
    values.update(overrides)
    return SwitchParams(**values)


def relay_params(**overrides):
    """Set-reset relay operating point (c-field detuned by Ω = g_b)."""
    values = dict(
        theta_a=-0.0565, theta_b=0.0,
        delta_cap=0.208, delta_small=40.1,
        eps_a=math.sqrt(0.01), eps_b=math.sqrt(0.1), eps_c=math.sqrt(0.01),
        g_a=1.57, g_b=40.0, omega_cap=40.0,
        kappa_a=1.0, kappa_b=1.0, gamma_a=0.2, gamma_b=1.0,
        n_a=3, n_b=3,
    )
    values.update(overrides)
    return SwitchParams(**values)


@dataclass(frozen=True)
class DriveState:
    """Which control fields are switched on. The signal drive is always on."""

    a_on: bool = False
    c_on: bool = False

    def label(self):
        if self.a_on and self.c_on:
            return "a+c"
        if self.a_on:
            return "a"
        if self.c_on:
            return "c"
        return "off"


DRIVES_OFF = DriveState()
A_DRIVE_ON = DriveState(a_on=True)
C_FIELD_ON = DriveState(c_on=True)
DRIVE_STATES = {
    "off": DRIVES_OFF,
    "a": A_DRIVE_ON,
    "c": C_FIELD_ON,
    "a+c": DriveState(a_on=True, c_on=True),
}


def drive_state(label):
    """DriveState for a label such as ``"a"``, ``"c"``, ``"off"`` or ``"a+c"``."""
    try:
        return DRIVE_STATES[label]
    except KeyError:
        raise InvalidArgumentError(
            f"unknown drive label {label!r}; expected one of {sorted(DRIVE_STATES)}"
        ) from None


@dataclass(frozen=True, eq=False)
class SwitchOperators:
    layout: SpaceLayout
    a: np.ndarray
    b: np.ndarray
    sigma_h: np.ndarray  # |H⟩⟨E|
    sigma_g: np.ndarray  # |G⟩⟨E|
    proj_g: np.ndarray
    proj_h: np.ndarray
    proj_e: np.ndarray
    num_a: np.ndarray
    num_b: np.ndarray

    def operator(self, name):
        return Operator(self.layout, getattr(self, name))


@lru_cache(maxsize=32)
def switch_operators(n_a, n_b):
    """Embedded ladder, transition and projection operators for given cutoffs."""
    layout = SpaceLayout.switch(n_a, n_b)

    def on_lambda(i, j):
        return embed(transition(3, i, j), 0, layout).entries

    a = embed(annihilation(n_a), 1, layout).entries
    b = embed(annihilation(n_b), 2, layout).entries
    return SwitchOperators(
        layout=layout,
        a=a,
        b=b,
        sigma_h=on_lambda(H, E),
        sigma_g=on_lambda(G, E),
        proj_g=on_lambda(G, G),
        proj_h=on_lambda(H, H),
        proj_e=on_lambda(E, E),
        num_a=a.conj().T @ a,
        num_b=b.conj().T @ b,
    )


@dataclass(frozen=True, eq=False)
class HamiltonianParts:
    """H(t) = static + exp(-iΩt) c_term + exp(+iΩt) c_term†."""

    layout: SpaceLayout
    static: np.ndarray
    c_term: object  # np.ndarray or None when the c-field is off
    omega: float

    def at(self, t):
        if self.c_term is None:
            return self.static
        phase = np.exp(-1j * self.omega * t)
        return self.static + phase * self.c_term + np.conj(phase) * self.c_term.conj().T


def hamiltonian_parts(params, drives):
    ops = switch_operators(params.n_a, params.n_b)
    a, b = ops.a, ops.b
    a_dag, b_dag = a.conj().T, b.conj().T
    sh, sg = ops.sigma_h, ops.sigma_g
    static = (
        -params.theta_a * ops.num_a
        - params.theta_b * ops.num_b
        + params.delta_cap * ops.proj_e
        + params.theta_b * ops.proj_g
        + (params.theta_a + params.delta_small) * ops.proj_h
        + 1j * params.g_a * (a_dag @ sh - a @ sh.conj().T)
        + 1j * params.g_b * (b_dag @ sg - b @ sg.conj().T)
        + 1j * params.eps_b * (b_dag - b)
    )
    if drives.a_on:
        static = static + 1j * params.eps_a * (a_dag - a)
    c_term = 1j * params.eps_c * b_dag if drives.c_on else None
    return HamiltonianParts(ops.layout, static, c_term, params.omega_cap)


def hamiltonian(params, drives, t=0.0):
    """Rotating-frame Hamiltonian (divided by ħ) at time ``t``."""
    return Operator(params.layout, hamiltonian_parts(params, drives).at(t))


def _channels(params, mirror_resolved):
    ops = switch_operators(params.n_a, params.n_b)
    out = [("spont_H", 2.0 * params.gamma_a, ops.sigma_h),
           ("spont_G", 2.0 * params.gamma_b, ops.sigma_g)]
    for mode, lowering in (("a", ops.a), ("b", ops.b)):
        if mirror_resolved:
            out.append((f"{mode}_in", 2.0 * params.kappa_in(mode), lowering))
            out.append((f"{mode}_out", 2.0 * params.kappa_out(mode), lowering))
            out.append((f"{mode}_loss", 2.0 * params.kappa_loss(mode), lowering))
        else:
            out.append((mode, 2.0 * params.kappa(mode), lowering))
    return [(label, math.sqrt(rate), op) for label, rate, op in out if rate > 0.0]


def collapse_operators(params, mirror_resolved=False):
    """Lindblad jump operators; zero-rate channels are omitted.

    With ``mirror_resolved`` the cavity decays are split into input-mirror,
    output-mirror and (if the fractions sum below one) loss channels.
    """
    layout = params.layout
    return [Operator(layout, coeff * op) for _, coeff, op in _channels(params, mirror_resolved)]


def channel_labels(params, mirror_resolved=False):
    """Names matching :func:`collapse_operators` entry by entry."""
    return [label for label, _, _ in _channels(params, mirror_resolved)]


@dataclass(frozen=True, eq=False)
class SingleExcitationSpectrum:
    """Eigen-structure of the one-excitation block {|G,0,1⟩, |H,1,0⟩, |E,0,0⟩}.

    Attributes:
        matrix (np.ndarray): The 3x3 block.
        eigenvalues (np.ndarray): Sorted by real part, ties by imaginary part.
        relative_to_h00 (np.ndarray): Eigenvalues minus the energy Θ_a + δ of
            |H,0,0⟩ at the current Θ_a.
        theta_a_resonances (np.ndarray): Θ_a values at which the a-drive is
            resonant from |H,0,0⟩ with each level (eigenvalue - δ).
        max_imag (float): Largest |imaginary part| among the eigenvalues.
    """

    matrix: np.ndarray
    eigenvalues: np.ndarray
    relative_to_h00: np.ndarray
    theta_a_resonances: np.ndarray
    max_imag: float


def single_excitation_matrix(params):
    gb, ga = params.g_b, params.g_a
    matrix = np.array(
        [[0.0, 0.0, 1j * gb],
         [0.0, params.delta_small, 1j * ga],
         [-1j * gb, -1j * ga, params.delta_cap]],
        dtype=complex,
    )
    eig = np.linalg.eigvals(matrix)
    eig = eig[np.lexsort((eig.imag, eig.real))]
    max_imag = float(np.max(np.abs(eig.imag)))
    if max_imag > 1e-9:
        logger.warning("single-excitation eigenvalues are complex (max |imag| = %.3e)", max_imag)
    real = eig.real
    return SingleExcitationSpectrum(
        matrix=matrix,
        eigenvalues=eig,
        relative_to_h00=real - (params.theta_a + params.delta_small),
        theta_a_resonances=real - params.delta_small,
        max_imag=max_imag,
    )


def coherent_amplitudes(params):
    """Empty-cavity field amplitudes (ξ_a, ξ_b) with both drives on."""
    xi_a = params.eps_a / complex(params.kappa_a, -params.theta_a)
    xi_b = params.eps_b / complex(params.kappa_b, -params.theta_b)
    return xi_a, xi_b


def dark_state(params):
    """Raman dark state (c_H|H⟩ + c_G|G⟩) ⊗ |ξ_a⟩ ⊗ |ξ_b⟩.

    It is stationary when the Raman transition is resonant, Θ_a + δ = Θ_b.

    Raises:
        InvalidArgumentError: If g_a or E_a vanish (ratio c_H/c_G undefined).
    """
    if params.g_a == 0.0 or params.eps_a == 0.0:
        raise InvalidArgumentError("dark state needs g_a != 0 and eps_a != 0")
    xi_a, xi_b = coherent_amplitudes(params)
    ratio = -params.g_b * xi_b / (params.g_a * xi_a)
    emitter = np.zeros(3, dtype=complex)
    emitter[G] = 1.0
    emitter[H] = ratio
    emitter = StateVector(SpaceLayout.single(3), emitter / np.linalg.norm(emitter))
    state = product_state([
        emitter,
        coherent_state(params.n_a, xi_a),
        coherent_state(params.n_b, xi_b),
    ])
    return state.normalized()


def lambda_support(layout, levels):
    """Flat basis indices whose lambda label is in ``levels`` (e.g. ("G",))."""
    wanted = {LEVEL_INDEX[l] if isinstance(l, str) else int(l) for l in levels}
    labels = np.unravel_index(np.arange(layout.total), layout.dims)[0]
    return np.flatnonzero(np.isin(labels, sorted(wanted)))
