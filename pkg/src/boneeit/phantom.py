"""Synthetic tank experiments: a cement-coated surrogate in a water-filled tank.

A scenario is a list of steps measured against the same tank. Load steps scale
the inclusion conductivity by the piezoresistive factor relative to the
baseline load; failure steps either cut a crack band through the inclusion
(filled with water) or raise the conductivity of a rim of the inclusion,
standing in for cement exposed by debonding.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np

from . import forward
from .forward import DEFAULT_CONTACT_IMPEDANCE, Protocol, adjacent_protocol
from .material import PercolationModel, PiezoModel, percolation_sigma, piezo_factor
from .mesh import Mesh, generate_disk_mesh

LOAD, FRACTURE, DEBONDING = "load", "fracture", "debonding"
STEP_KINDS = (LOAD, FRACTURE, DEBONDING)
LOAD_LADDER = (50.0, 450.0, 900.0, 1350.0, 2250.0, 3100.0, 4000.0)  # N


class ScenarioError(ValueError):
    pass


@dataclass(frozen=True)
class PhantomSpec:
    tank_radius: float = 0.0665
    background_sigma: float = 1e-3
    inclusion_center: tuple[float, float] = (0.0, 0.0)
    inclusion_diameter: float = 0.045
    inclusion_sigma0: float = field(default_factory=lambda: percolation_sigma(PercolationModel(), 0.02))
    crack_angle: float = math.pi / 2  # direction of the crack band through the centre
    crack_width_elements: float = 2.0
    debond_gain: float = 5.0
    debond_width: float = 0.005  # m, rim thickness

    def __post_init__(self):
        object.__setattr__(self, "inclusion_center", tuple(float(c) for c in self.inclusion_center))
        if not self.tank_radius > 0:
            raise ScenarioError("tank_radius must be positive")
        if self.background_sigma <= 0 or self.inclusion_sigma0 <= 0:
            raise ScenarioError("conductivities must be positive")
        if self.inclusion_diameter < 0:
            raise ScenarioError("inclusion_diameter must be non-negative")
        if math.hypot(*self.inclusion_center) + self.inclusion_diameter / 2 > self.tank_radius:
            raise ScenarioError("inclusion must lie inside the tank")
        if not self.debond_gain > 1:
            raise ScenarioError("debond_gain must exceed 1")
        if self.crack_width_elements <= 0 or self.debond_width <= 0:
            raise ScenarioError("crack and debond widths must be positive")


@dataclass(frozen=True)
class ScenarioStep:
    label: str
    kind: str = LOAD
    force: float = 0.0  # N; for failure steps, the load held while measuring

    def __post_init__(self):
        if self.kind not in STEP_KINDS:
            raise ScenarioError(f"unknown step kind {self.kind!r}; expected one of {STEP_KINDS}")
        if not self.force >= 0:
            raise ScenarioError(f"step {self.label!r}: force must be non-negative")


@dataclass(frozen=True)
class NoiseSpec:
    rel: float = 1e-3
    abs_floor: float = 1e-6  # V

    def __post_init__(self):
        if self.rel < 0 or self.abs_floor < 0:
            raise ScenarioError("noise levels must be non-negative")

    @property
    def silent(self) -> bool:
        return self.rel == 0 and self.abs_floor == 0


def phantom_mesh(spec: PhantomSpec | None = None, target_edge_length: float = 0.005, n_electrodes: int = 16,
                 electrode_coverage: float = 0.5) -> Mesh:
    """Tank mesh whose element edges follow a centred inclusion boundary."""
    spec = spec or PhantomSpec()
    cuts = ()
    if spec.inclusion_diameter > 0 and spec.inclusion_center == (0.0, 0.0):
        cuts = (spec.inclusion_diameter / 2,)
    return generate_disk_mesh(spec.tank_radius, n_electrodes, electrode_coverage, target_edge_length, cuts)


def inclusion_mask(spec: PhantomSpec, mesh: Mesh) -> np.ndarray:
    d = np.linalg.norm(mesh.centroids - np.array(spec.inclusion_center), axis=1)
    return d < spec.inclusion_diameter / 2


def crack_mask(spec: PhantomSpec, mesh: Mesh) -> np.ndarray:
    """Inclusion elements in a straight band through the inclusion centre.

    The band is `crack_width_elements` local element sizes wide, the size
    being ``sqrt(2 * mean area)`` of the inclusion's elements.
    """
    inc = inclusion_mask(spec, mesh)
    if not inc.any():
        return inc
    size = math.sqrt(2 * mesh.areas[inc].mean())
    normal = np.array([-math.sin(spec.crack_angle), math.cos(spec.crack_angle)])
    dist = np.abs((mesh.centroids - np.array(spec.inclusion_center)) @ normal)
    return inc & (dist <= spec.crack_width_elements * size / 2)


def rim_mask(spec: PhantomSpec, mesh: Mesh) -> np.ndarray:
    d = np.linalg.norm(mesh.centroids - np.array(spec.inclusion_center), axis=1)
    return inclusion_mask(spec, mesh) & (d >= spec.inclusion_diameter / 2 - spec.debond_width)


def build_field(spec: PhantomSpec, mesh: Mesh) -> np.ndarray:
    """Per-element conductivity of the unloaded tank."""
    if abs(mesh.radius - spec.tank_radius) > 1e-9 * spec.tank_radius:
        raise ScenarioError(f"mesh radius {mesh.radius} does not match tank radius {spec.tank_radius}")
    sigma = np.full(mesh.n_elements, spec.background_sigma)
    if spec.inclusion_diameter > 0:
        inc = inclusion_mask(spec, mesh)
        if not inc.any():
            raise ScenarioError("no mesh element lies inside the inclusion; refine the mesh")
        sigma[inc] = spec.inclusion_sigma0
    return sigma


def apply_step(sigma, spec: PhantomSpec, step: ScenarioStep, piezo: PiezoModel, mesh: Mesh,
               baseline_force: float = LOAD_LADDER[0]) -> np.ndarray:
    """Conductivity field for `step`, starting from the unloaded field `sigma`."""
    if step.kind not in STEP_KINDS:
        raise ScenarioError(f"unknown step kind {step.kind!r}")
    out = np.array(sigma, dtype=float)
    inc = inclusion_mask(spec, mesh)
    out[inc] *= piezo_factor(piezo, step.force) / piezo_factor(piezo, baseline_force)
    if step.kind == FRACTURE:
        out[crack_mask(spec, mesh)] = spec.background_sigma
    elif step.kind == DEBONDING:
        out[rim_mask(spec, mesh)] *= spec.debond_gain
    return out


@dataclass(frozen=True)
class Scenario:
    phantom: PhantomSpec
    steps: tuple[ScenarioStep, ...]
    noise: NoiseSpec = NoiseSpec()
    seed: int = 0
    piezo: PiezoModel = PiezoModel()
    contact_impedance: float = DEFAULT_CONTACT_IMPEDANCE
    amplitude: float = forward.DEFAULT_AMPLITUDE
    name: str = ""

    def __post_init__(self):
        if not self.steps:
            raise ScenarioError("a scenario needs at least one step")
        if self.steps[0].kind != LOAD:
            raise ScenarioError("the first step is the baseline and must be a load step")

    def protocol(self, n_electrodes: int) -> Protocol:
        return adjacent_protocol(n_electrodes, self.amplitude)


def scenario_from_dict(doc: dict) -> Scenario:
    try:
        ph = dict(doc.get("phantom", {}))
        if "volume_fraction" in ph:
            perc = PercolationModel(**doc.get("percolation", {}))
            ph["inclusion_sigma0"] = percolation_sigma(perc, ph.pop("volume_fraction"))
        steps = tuple(ScenarioStep(str(s["label"]), s.get("kind", LOAD), float(s.get("force_N", 0.0)))
                      for s in doc["steps"])
        return Scenario(
            phantom=PhantomSpec(**ph),
            steps=steps,
            noise=NoiseSpec(**doc.get("noise", {})),
            seed=int(doc.get("seed", 0)),
            piezo=PiezoModel(**doc.get("piezo", {})),
            contact_impedance=float(doc.get("contact_impedance_ohm_m", DEFAULT_CONTACT_IMPEDANCE)),
            amplitude=float(doc.get("amplitude_A", forward.DEFAULT_AMPLITUDE)),
            name=str(doc.get("name", "")),
        )
    except (KeyError, TypeError) as exc:
        raise ScenarioError(f"malformed scenario: {exc!r}") from None


def scenario_to_dict(sc: Scenario) -> dict:
    return {
        "name": sc.name,
        "phantom": asdict(sc.phantom),
        "steps": [{"label": s.label, "kind": s.kind, "force_N": s.force} for s in sc.steps],
        "noise": asdict(sc.noise),
        "seed": sc.seed,
        "piezo": asdict(sc.piezo),
        "contact_impedance_ohm_m": sc.contact_impedance,
        "amplitude_A": sc.amplitude,
    }


def preset_names() -> list[str]:
    return sorted(p.name[:-5] for p in resources.files("boneeit.presets").iterdir()
                  if p.name.endswith(".json"))


def load_scenario(path_or_name) -> Scenario:
    """Load a scenario file, or a bundled preset by name (e.g. ``ladder_2.0volpct``)."""
    path = Path(path_or_name)
    if path.is_file():
        text = path.read_text()
    elif str(path_or_name) in preset_names():
        text = resources.files("boneeit.presets").joinpath(f"{path_or_name}.json").read_text()
    else:
        raise FileNotFoundError(f"no scenario file or preset named {str(path_or_name)!r}")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{path_or_name}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    return scenario_from_dict(doc)


def add_noise(v: np.ndarray, noise: NoiseSpec, seed: int, index: int) -> np.ndarray:
    """Zero-mean Gaussian noise with sd ``rel*|v| + abs_floor``, from stream (seed, index)."""
    if noise.silent:
        return v.copy()
    rng = np.random.default_rng([seed, index])
    return v + rng.standard_normal(v.shape) * (noise.rel * np.abs(v) + noise.abs_floor)


def step_fields(scenario: Scenario, mesh: Mesh) -> list[np.ndarray]:
    base = build_field(scenario.phantom, mesh)
    f0 = scenario.steps[0].force
    return [apply_step(base, scenario.phantom, s, scenario.piezo, mesh, f0) for s in scenario.steps]


def simulate_scenario(scenario: Scenario, mesh: Mesh, protocol: Protocol | None = None,
                      noise: NoiseSpec | None = None, seed: int | None = None):
    """Noisy protocol voltages for each step, as ``[(label, voltages), ...]``."""
    protocol = protocol or scenario.protocol(mesh.n_electrodes)
    noise = scenario.noise if noise is None else noise
    seed = scenario.seed if seed is None else seed
    out = []
    for k, (step, sigma) in enumerate(zip(scenario.steps, step_fields(scenario, mesh))):
        v = forward.simulate(mesh, sigma, protocol, scenario.contact_impedance)
        out.append((step.label, add_noise(v, noise, seed, k)))
    return out


def ladder_scenario(volume_fraction: float = 0.02, loads=LOAD_LADDER, **kw) -> Scenario:
    ph = PhantomSpec(inclusion_sigma0=percolation_sigma(PercolationModel(), volume_fraction))
    steps = tuple(ScenarioStep(f"{int(f)}N", LOAD, float(f)) for f in loads)
    return Scenario(ph, steps, **kw)


def with_steps(scenario: Scenario, steps) -> Scenario:
    return replace(scenario, steps=tuple(steps))
