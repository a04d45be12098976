"""Discrete linear plant models and their configuration files.

Configs ship precomputed ``A``, ``B`` and two feedback gains.  Loading a
config re-checks that both gains stabilize the model and that ``K2`` has
lower quadratic cost than ``K1``.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional

import numpy as np
import scipy.linalg

from ..ft.lta import linear_step

GRAVITY = 9.81


class PlantConfigError(ValueError):
    pass


@dataclass
class PlantModel:
    A: np.ndarray
    B: np.ndarray
    h_ms: int
    x0: np.ndarray
    noise_bound: float = 0.0
    state_bound: float = 10.0
    name: str = "plant"

    def __post_init__(self):
        self.A = np.atleast_2d(np.asarray(self.A, dtype=float))
        self.B = np.asarray(self.B, dtype=float)
        if self.B.ndim == 1:
            self.B = self.B.reshape(-1, 1)
        self.x0 = np.asarray(self.x0, dtype=float).reshape(-1)
        n = self.A.shape[0]
        if self.A.shape != (n, n) or self.B.shape[0] != n or self.x0.shape != (n,):
            raise PlantConfigError(f"inconsistent dimensions A{self.A.shape} B{self.B.shape} x0{self.x0.shape}")
        if self.h_ms <= 0:
            raise PlantConfigError("h_ms must be > 0")
        if self.noise_bound < 0 or self.state_bound <= 0:
            raise PlantConfigError("noise_bound must be >= 0 and state_bound > 0")

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]


@dataclass(frozen=True)
class ControllerGain:
    K: np.ndarray
    label: str

    def __post_init__(self):
        object.__setattr__(self, "K", np.atleast_2d(np.asarray(self.K, dtype=float)))

    def check(self, plant: PlantModel) -> None:
        if self.K.shape != (plant.m, plant.n):
            raise PlantConfigError(f"gain {self.label} has shape {self.K.shape}, plant needs {(plant.m, plant.n)}")


def plant_step(p: PlantModel, x, u, rng: Optional[random.Random] = None) -> np.ndarray:
    """x' = A x + B u + w with w uniform in +-noise_bound per component."""
    x = np.asarray(x, dtype=float).reshape(-1)
    u = np.asarray(u, dtype=float).reshape(-1)
    if x.shape != (p.n,) or u.shape != (p.m,):
        raise ValueError(f"plant expects x of shape ({p.n},) and u of shape ({p.m},)")
    nxt = linear_step(p.A, p.B, x, u)
    if p.noise_bound > 0:
        if rng is None:
            raise ValueError("a noisy plant needs an rng")
        nxt = nxt + np.array([rng.uniform(-p.noise_bound, p.noise_bound) for _ in range(p.n)])
    return nxt


def diverged(p: PlantModel, x) -> bool:
    return bool(np.max(np.abs(x)) > p.state_bound) or not np.all(np.isfinite(x))


class Plant:
    """Mutable plant instance: current state plus a divergence flag."""

    def __init__(self, model: PlantModel, rng: random.Random):
        self.model = model
        self.rng = rng
        self.x = model.x0.copy()
        self.k = 0
        self.diverged_at: Optional[int] = None

    def step(self, u, now_ms: int = 0) -> np.ndarray:
        self.x = plant_step(self.model, self.x, u, self.rng)
        self.k += 1
        if self.diverged_at is None and diverged(self.model, self.x):
            self.diverged_at = now_ms
        return self.x


# -- analysis helpers --------------------------------------------------------------

def closed_loop(p: PlantModel, g: ControllerGain) -> np.ndarray:
    return p.A - p.B @ g.K


def spectral_radius(M) -> float:
    return float(max(abs(np.linalg.eigvals(M))))


def quadratic_cost(p: PlantModel, g: ControllerGain) -> float:
    """Sum over k of x_k' x_k * h (seconds) from x0 on the nominal model."""
    Acl = closed_loop(p, g)
    P = scipy.linalg.solve_discrete_lyapunov(Acl.T, np.eye(p.n))
    return float(p.x0 @ P @ p.x0) * p.h_ms / 1000.0


def stationary_cost_rate(p: PlantModel, g: ControllerGain) -> float:
    """E[x' x] under the uniform disturbance; the long-run cost per step."""
    Acl = closed_loop(p, g)
    W = np.eye(p.n) * (p.noise_bound**2 / 3.0)
    S = scipy.linalg.solve_discrete_lyapunov(Acl, W)
    return float(np.trace(S))


# -- model construction (used to generate the shipped configs) ---------------------

def zoh(Ac, Bc, h_s: float) -> tuple[np.ndarray, np.ndarray]:
    n, m = Ac.shape[0], Bc.shape[1]
    M = np.zeros((n + m, n + m))
    M[:n, :n] = Ac
    M[:n, n:] = Bc
    E = scipy.linalg.expm(M * h_s)
    return E[:n, :n], E[:n, n:]


def pendubot_continuous(theta=(0.0308, 0.0106, 0.0095, 0.2086, 0.0631), g: float = GRAVITY):
    """Two-link pendubot linearized about the upright position.

    State (q1 - pi/2, q2, dq1, dq2); torque acts on the first joint only.
    """
    t1, t2, t3, t4, t5 = theta
    M = np.array([[t1 + t2 + 2 * t3, t2 + t3], [t2 + t3, t2]])
    G = -g * np.array([[t4 + t5, t5], [t5, t5]])  # d(gravity)/dq at upright
    Minv = np.linalg.inv(M)
    Ac = np.zeros((4, 4))
    Ac[:2, 2:] = np.eye(2)
    Ac[2:, :2] = -Minv @ G
    Bc = np.zeros((4, 1))
    Bc[2:, 0] = Minv @ np.array([1.0, 0.0])
    return Ac, Bc


def cartpole_continuous(M: float = 0.5, m: float = 0.2, l: float = 0.3, g: float = GRAVITY):
    """Cart-pole linearized about upright; state (x, theta, dx, dtheta), force input."""
    Ac = np.zeros((4, 4))
    Ac[0, 2] = Ac[1, 3] = 1.0
    Ac[2, 1] = -m * g / M
    Ac[3, 1] = (M + m) * g / (M * l)
    Bc = np.zeros((4, 1))
    Bc[2, 0] = 1.0 / M
    Bc[3, 0] = -1.0 / (M * l)
    return Ac, Bc


def dlqr(A, B, Q, R) -> np.ndarray:
    P = scipy.linalg.solve_discrete_are(A, B, Q, R)
    return np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)


# -- config files -----------------------------------------------------------------------

@dataclass
class PlantConfig:
    plant: PlantModel
    gains: dict = field(default_factory=dict)
    source: str = ""

    def gain(self, label: str) -> ControllerGain:
        try:
            return self.gains[label]
        except KeyError:
            raise PlantConfigError(f"unknown gain {label!r}; have {sorted(self.gains)}") from None


BUILTIN = ("pendubot", "cartpole")


def _builtin_path(name: str):
    return resources.files("ncsmw.pendulum").joinpath("configs", f"{name}.json")


def plant_config_from_dict(doc: dict, source: str = "") -> PlantConfig:
    try:
        plant = PlantModel(
            A=doc["A"],
            B=doc["B"],
            h_ms=int(doc["h_ms"]),
            x0=doc["x0"],
            noise_bound=float(doc.get("noise_bound", 0.0)),
            state_bound=float(doc.get("state_bound", 10.0)),
            name=doc.get("name", "plant"),
        )
        gains = {label: ControllerGain(K, label) for label, K in doc["gains"].items()}
    except KeyError as exc:
        raise PlantConfigError(f"{source or 'plant config'}: missing key {exc}") from None
    cfg = PlantConfig(plant, gains, source)
    verify_plant_config(cfg)
    return cfg


def verify_plant_config(cfg: PlantConfig) -> None:
    for g in cfg.gains.values():
        g.check(cfg.plant)
        rho = spectral_radius(closed_loop(cfg.plant, g))
        if not rho < 1.0:
            raise PlantConfigError(f"gain {g.label} does not stabilize {cfg.plant.name} (spectral radius {rho:.4f})")
    if "K1" in cfg.gains and "K2" in cfg.gains:
        c1, c2 = quadratic_cost(cfg.plant, cfg.gains["K1"]), quadratic_cost(cfg.plant, cfg.gains["K2"])
        if not c2 < c1:
            raise PlantConfigError(f"K2 is not better than K1 on the nominal model ({c2:.4g} >= {c1:.4g})")
        if cfg.plant.noise_bound > 0:
            r1 = stationary_cost_rate(cfg.plant, cfg.gains["K1"])
            r2 = stationary_cost_rate(cfg.plant, cfg.gains["K2"])
            if not r2 < r1:
                raise PlantConfigError(f"K2 has a higher stationary cost rate than K1 ({r2:.4g} >= {r1:.4g})")


def load_plant_config(name_or_path="pendubot") -> PlantConfig:
    """Load a shipped config by name or a JSON file by path."""
    if isinstance(name_or_path, str) and name_or_path in BUILTIN:
        text = _builtin_path(name_or_path).read_text()
        source = name_or_path
    else:
        path = Path(name_or_path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise PlantConfigError(f"cannot read plant config {path}: {exc}") from None
        source = str(path)
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise PlantConfigError(f"{source}: line {exc.lineno}: {exc.msg}") from None
    return plant_config_from_dict(doc, source)


def design_config(name: str, h_ms: int = 15) -> dict:
    """Build a config document; this is how the shipped JSON files were made."""
    if name == "pendubot":
        Ac, Bc = pendubot_continuous()
        x0 = [0.05, -0.03, 0.0, 0.0]
        noise, bound = 1e-4, 1.0
        r1, r2 = 100.0, 1e-3
    elif name == "cartpole":
        Ac, Bc = cartpole_continuous()
        x0 = [0.1, 0.05, 0.0, 0.0]
        noise, bound = 1e-4, 5.0
        r1, r2 = 10.0, 1e-2
    else:
        raise PlantConfigError(f"unknown model {name!r}")
    A, B = zoh(Ac, Bc, h_ms / 1000.0)
    # both minimize sum x'x + r u'u; the cheaper-control K2 tracks x'x more tightly
    K1 = dlqr(A, B, np.eye(4), np.array([[r1]]))
    K2 = dlqr(A, B, np.eye(4), np.array([[r2]]))
    return {
        "name": name,
        "h_ms": h_ms,
        "A": A.tolist(),
        "B": B.tolist(),
        "x0": x0,
        "noise_bound": noise,
        "state_bound": bound,
        "gains": {"K1": K1.tolist(), "K2": K2.tolist()},
    }


def _write_builtin_configs(out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    for name in BUILTIN:
        doc = design_config(name)
        plant_config_from_dict(doc, name)
        (out_dir / f"{name}.json").write_text(json.dumps(doc, indent=2) + "\n")


if __name__ == "__main__":
    _write_builtin_configs(Path(__file__).with_name("configs"))
