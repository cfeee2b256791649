import math
from typing import Any, Dict, List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

# --- CONVENTIONS ---
# Images are plain numpy arrays of shape (height, width, channels), float64, linear radiance.
# Everything else that travels between modules is one of the models below.
# Array-carrying models are frozen and store read-only copies, so they can be shared across threads.

NormKind = Literal["l2", "l1", "huber", "two_stage"]
PatternKind = Literal["regular", "random"]
SceneKind = Literal["sphere", "heightmap", "flat_textured"]


def _frozen_array(value, dtype=None) -> np.ndarray:
    """Copies `value` into a read-only ndarray."""
    arr = np.array(value, dtype=dtype, copy=True)
    arr.flags.writeable = False
    return arr


class _ArrayModel(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)


# --- FILTER ARRAYS ---

class OrientationSet(BaseModel):
    """
    The K polarizer orientations of a filter array, in radians.
    """
    model_config = ConfigDict(frozen=True)

    angles: Tuple[float, ...]  # theta_1..theta_K, strictly increasing in [0, pi)

    @field_validator("angles")
    @classmethod
    def _check_angles(cls, angles):
        if len(angles) < 2:
            raise ValueError("an orientation set needs at least 2 angles")
        for a in angles:
            if not math.isfinite(a) or a < 0.0 or a >= math.pi:
                raise ValueError(f"angle {a} outside [0, pi)")
        if any(b <= a for a, b in zip(angles, angles[1:])):
            raise ValueError("angles must be strictly increasing")
        return tuple(float(a) for a in angles)

    @property
    def k(self) -> int:
        return len(self.angles)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.angles, dtype=np.float64)


class FilterArray(_ArrayModel):
    """
    One polarizer orientation per pixel.
    The implied masks A_k partition the image: every pixel carries exactly one index.
    """

    orientation_index: np.ndarray  # (height, width) ints in [0, K)
    orientations: OrientationSet

    @model_validator(mode="before")
    @classmethod
    def _coerce_index(cls, data):
        if isinstance(data, dict) and "orientation_index" in data:
            data = dict(data)
            data["orientation_index"] = _frozen_array(data["orientation_index"], dtype=np.int64)
        return data

    @model_validator(mode="after")
    def _check_index(self):
        idx = self.orientation_index
        if idx.ndim != 2 or idx.size == 0:
            raise ValueError("orientation_index must be a non-empty 2-D array")
        if idx.min() < 0 or idx.max() >= self.orientations.k:
            raise ValueError(f"orientation_index values must lie in [0, {self.orientations.k})")
        return self

    @property
    def height(self) -> int:
        return int(self.orientation_index.shape[0])

    @property
    def width(self) -> int:
        return int(self.orientation_index.shape[1])

    @property
    def k(self) -> int:
        return self.orientations.k

    def mask(self, k: int) -> np.ndarray:
        """Boolean (height, width) mask A_k of the pixels behind orientation k."""
        return self.orientation_index == k

    def counts(self) -> np.ndarray:
        """Number of pixels per orientation."""
        return np.bincount(self.orientation_index.ravel(), minlength=self.k)


class PatternSpec(BaseModel):
    """Recipe for generate_pattern. Height and width may be filled in from the scene size."""

    kind: PatternKind = "random"
    k: int = Field(16, ge=2)
    seed: int = 0
    height: Optional[int] = Field(None, ge=1)
    width: Optional[int] = Field(None, ge=1)


class CaptureConfig(BaseModel):
    """Light polarization and sensor noise for one simulated capture."""

    phase: float = Field(0.0, ge=0.0, lt=math.pi)  # phi, radians
    noise_sigma: float = Field(0.0, ge=0.0)  # std-dev of additive Gaussian noise, linear units
    seed: int = 0  # noise PRNG seed


# --- SOLVERS ---

class SolverConfig(BaseModel):
    """
    Regularization weights and stopping rules shared by all separation solvers.
    Defaults are the file-absent defaults.
    """
    model_config = ConfigDict(populate_by_name=True)

    gamma_d: float = Field(0.01, gt=0.0)  # TV weight on the diffuse layer
    gamma_s: float = Field(0.002, gt=0.0)  # TV weight on the specular layer
    norm: NormKind = "l2"
    lam: float = Field(0.1, gt=0.0, alias="lambda")  # Bregman coupling weight (l1 only)
    huber_delta: float = Field(0.05, gt=0.0)  # Huber transition point
    cg_tol: float = Field(1e-8, gt=0.0)
    cg_max_iter: int = Field(2000, ge=1)
    outer_max_iter: int = Field(50, ge=1)
    outer_tol: float = Field(1e-4, gt=0.0)


class SeparationResult(_ArrayModel):
    """
    Diffuse/specular estimate plus solver diagnostics.
    """

    diffuse: np.ndarray  # (H, W, C)
    specular: np.ndarray  # (H, W, C)
    solver: str
    iterations: int = 0  # outer iterations for l1/huber, CG iterations for l2 (max over channels)
    final_residual: float = 0.0  # relative residual of the last linear solve (max over channels)
    objective_trace: List[float] = Field(default_factory=list)
    constraint_residual_trace: List[float] = Field(default_factory=list)  # ||Dz - d||, l1 only
    converged: bool = True
    flags: List[str] = Field(default_factory=list)

    @field_validator("diffuse", "specular", mode="before")
    @classmethod
    def _freeze(cls, value):
        return _frozen_array(value, dtype=np.float64)

    @model_validator(mode="after")
    def _check_shapes(self):
        if self.diffuse.shape != self.specular.shape:
            raise ValueError("diffuse and specular estimates must share a shape")
        return self


# --- CALIBRATION ---

class PhaseEstimate(BaseModel):
    """Light polarization phase and mean layer levels fitted to per-orientation means."""

    phase: float = Field(ge=0.0, lt=math.pi)
    mu_d: float
    mu_s: float = Field(ge=0.0)
    residual: float  # RMS misfit of the means
    identifiable: bool = True
    exactly_determined: bool = False  # K == 3: no redundancy to check the fit


# --- SYNTHETIC SCENES ---

class Scene(_ArrayModel):
    """Ground-truth geometry and reflectance of a procedural scene."""

    normals: np.ndarray  # (H, W, 3) unit vectors
    albedo: np.ndarray  # (H, W, C) in [0, 1]
    specular_coeff: float = Field(ge=0.0)  # k_s
    shininess: float = Field(ge=1.0)  # Blinn-Phong exponent
    matte: Optional[np.ndarray] = None  # (H, W) coverage in [0, 1]; None means fully covered

    @field_validator("normals", "albedo", "matte", mode="before")
    @classmethod
    def _freeze(cls, value):
        return None if value is None else _frozen_array(value, dtype=np.float64)

    @model_validator(mode="after")
    def _check(self):
        if self.normals.ndim != 3 or self.normals.shape[2] != 3:
            raise ValueError("normals must have shape (H, W, 3)")
        if self.albedo.ndim != 3 or self.albedo.shape[:2] != self.normals.shape[:2]:
            raise ValueError("albedo must have shape (H, W, C) matching the normals")
        if np.abs(np.linalg.norm(self.normals, axis=2) - 1.0).max() > 1e-6:
            raise ValueError("normals must be unit length")
        if self.albedo.min() < 0.0 or self.albedo.max() > 1.0:
            raise ValueError("albedo must lie in [0, 1]")
        if self.matte is not None:
            if self.matte.shape != self.normals.shape[:2]:
                raise ValueError("matte must have shape (H, W) matching the normals")
            if self.matte.min() < 0.0 or self.matte.max() > 1.0:
                raise ValueError("matte must lie in [0, 1]")
        return self

    @property
    def height(self) -> int:
        return int(self.normals.shape[0])

    @property
    def width(self) -> int:
        return int(self.normals.shape[1])

    def coverage(self) -> np.ndarray:
        """Per-pixel matte, ones when the scene has none."""
        if self.matte is None:
            return np.ones((self.height, self.width))
        return self.matte


class LightDome(_ArrayModel):
    """
    Directional lights on a hemisphere around a zenith camera looking down (0, 0, 1).
    `phases` optionally gives each lamp its own polarizer angle.
    """

    directions: np.ndarray  # (L, 3) unit vectors with z > 0
    phases: Optional[np.ndarray] = None  # (L,) radians in [0, pi)

    @field_validator("directions", "phases", mode="before")
    @classmethod
    def _freeze(cls, value):
        return None if value is None else _frozen_array(value, dtype=np.float64)

    @model_validator(mode="after")
    def _check(self):
        d = self.directions
        if d.ndim != 2 or d.shape[1] != 3 or d.shape[0] < 3:
            raise ValueError("a light dome needs at least 3 directions of shape (L, 3)")
        if np.abs(np.linalg.norm(d, axis=1) - 1.0).max() > 1e-9:
            raise ValueError("light directions must be unit length")
        if d[:, 2].min() <= 0.0:
            raise ValueError("light directions must point into the upper hemisphere")
        if self.phases is not None:
            if self.phases.shape != (d.shape[0],):
                raise ValueError("one phase per light is required")
            if self.phases.min() < 0.0 or self.phases.max() >= math.pi:
                raise ValueError("light phases must lie in [0, pi)")
        return self

    @property
    def count(self) -> int:
        return int(self.directions.shape[0])


# --- PHOTOMETRIC STEREO ---

class NormalMap(_ArrayModel):
    """Per-pixel unit normals and albedo; invalid pixels carry the placeholder normal (0, 0, 1)."""

    normals: np.ndarray  # (H, W, 3)
    albedo: np.ndarray  # (H, W)
    valid: np.ndarray  # (H, W) bool

    @field_validator("normals", "albedo", mode="before")
    @classmethod
    def _freeze_float(cls, value):
        return _frozen_array(value, dtype=np.float64)

    @field_validator("valid", mode="before")
    @classmethod
    def _freeze_bool(cls, value):
        return _frozen_array(value, dtype=bool)

    @model_validator(mode="after")
    def _check(self):
        h, w = self.valid.shape
        if self.normals.shape != (h, w, 3) or self.albedo.shape != (h, w):
            raise ValueError("normals, albedo and valid must share height and width")
        return self


# --- REPORTS ---

class MetricReport(BaseModel):
    """
    One evaluation row. Infinite PSNR means the two images were identical.
    """

    scene: str = "scene"
    pattern: str = ""
    k: int = 0
    solver: str = ""
    psnr_diffuse: float
    psnr_specular: float
    psnr_sum: float
    wall_time_s: float = 0.0
    config: Dict[str, Any] = Field(default_factory=dict)

    @property
    def identical(self) -> bool:
        return math.isinf(self.psnr_diffuse) and math.isinf(self.psnr_specular)


# --- MANIFEST ---

class SceneSpec(BaseModel):
    """Procedural scene recipe used by simulate, sweep and normals."""

    name: Optional[str] = None
    kind: SceneKind = "sphere"
    size: int = Field(64, ge=16)
    seed: int = 0
    channels: Literal[1, 3] = 1
    specular_coeff: float = Field(0.5, ge=0.0)
    shininess: float = Field(50.0, ge=1.0)
    albedo_gain: float = Field(1.0, gt=0.0, le=1.0)  # scales the whole albedo map
    light: Tuple[float, float, float] = (0.3, 0.2, 1.0)  # normalised on use

    @property
    def label(self) -> str:
        return self.name or f"{self.kind}-{self.seed}"


class DomeSpec(BaseModel):
    count: int = Field(58, ge=3)
    max_zenith_deg: float = Field(80.0, gt=0.0, lt=90.0)
    per_light_phases: bool = False  # draw an individual polarizer angle per lamp
    seed: int = 0


def _default_suite() -> List[SceneSpec]:
    return [
        SceneSpec(kind="sphere", size=128, seed=0),
        SceneSpec(kind="sphere", size=128, seed=1, specular_coeff=0.3, shininess=20.0),
        SceneSpec(kind="heightmap", size=128, seed=2),
        SceneSpec(kind="heightmap", size=128, seed=3, specular_coeff=0.3),
        SceneSpec(kind="flat_textured", size=128, seed=4, specular_coeff=0.4),
    ]


class SweepSpec(BaseModel):
    """Grid of (scene x pattern kind x K x solver) runs."""

    scenes: List[SceneSpec] = Field(default_factory=_default_suite)
    patterns: List[PatternKind] = Field(default_factory=lambda: ["random"])
    ks: List[int] = Field(default_factory=lambda: [4, 8, 16])
    solvers: List[NormKind] = Field(default_factory=lambda: ["l2"])
    estimate_phase: bool = True  # False: use the capture phase as known


class InputPaths(BaseModel):
    mosaic: Optional[str] = None
    pattern: Optional[str] = None
    estimate_diffuse: Optional[str] = None
    estimate_specular: Optional[str] = None
    truth_diffuse: Optional[str] = None
    truth_specular: Optional[str] = None
    diffuse_stack: List[str] = Field(default_factory=list)
    lights: Optional[str] = None
    truth_normals: Optional[str] = None
    reference_normals: Optional[str] = None  # e.g. stereo on the ground-truth diffuse stack


class RunManifest(BaseModel):
    """
    Everything one CLI invocation needs. All randomness is seeded from here.
    """

    subcommand: Optional[str] = None
    scene: SceneSpec = Field(default_factory=SceneSpec)
    pattern: PatternSpec = Field(default_factory=PatternSpec)
    capture: CaptureConfig = Field(default_factory=CaptureConfig)
    solver: SolverConfig = Field(default_factory=SolverConfig)
    dome: DomeSpec = Field(default_factory=DomeSpec)
    sweep: SweepSpec = Field(default_factory=SweepSpec)
    inputs: InputPaths = Field(default_factory=InputPaths)
    phase_deg: Optional[float] = None  # user-supplied phase; None means estimate
    out_dir: Optional[str] = None
