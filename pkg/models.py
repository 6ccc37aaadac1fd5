# models.py — pydantic models (layout, profiles, hyper-parameters, run config) + error types
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from typing import Dict, List, Literal, Optional, Tuple

SEQUENCES = ("T2-HASTE", "T2-TSE", "T2-MAP", "T1-TSE", "T2-FLAIR")
FRUIT_CLASSES = ("kiwi", "lime", "apple", "onion")
SCAN_IDS = ("1", "2", "R1", "R2")
BASELINE_SCANS = ("1", "2")
ROTATED_SCANS = ("R1", "R2")
OBSERVERS = ("obs1", "obs2")
SEG_TYPES = ("full_A", "full_B", "partial", "rotated_full")

StructureKind = Literal["concentric_shells", "radial_seeds", "wedge_septa", "homogeneous_core"]
Triple = Tuple[float, float, float]


# ── errors ────────────────────────────────────────────────────────────────────

class ShiftForgeError(RuntimeError):
    exit_code = 3


class ConfigError(ShiftForgeError):
    exit_code = 1


class DataError(ShiftForgeError):
    exit_code = 2


class LayoutError(DataError):
    pass


class SegmentationError(DataError):
    pass


class LearnerError(DataError):
    pass


class ScenarioError(ShiftForgeError):
    exit_code = 3


class LeakageError(ScenarioError):
    pass


# ── phantom ───────────────────────────────────────────────────────────────────

class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class TextureParams(_Strict):
    base_intensity: float
    texture_amplitude: float = Field(..., ge=0)
    texture_scale: float = Field(..., gt=0, description="value-noise lattice pitch, mm")
    internal_structure_kind: StructureKind


class FruitEntry(_Strict):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    instance_id: int = Field(..., ge=1, le=16)
    fruit_class: Literal["kiwi", "lime", "apple", "onion"] = Field(..., alias="class")
    center: Triple
    semi_axes: Triple
    orientation_deg: float = 0.0
    texture_params: TextureParams

    @field_validator("semi_axes")
    @classmethod
    def _positive_axes(cls, v):
        if min(v) <= 0:
            raise ValueError("semi_axes must be > 0")
        return v


class PhantomLayout(_Strict):
    dims: Tuple[int, int, int] = (96, 96, 48)
    spacing: Triple = (1.0, 1.0, 2.0)
    fruits: List[FruitEntry]

    @field_validator("dims")
    @classmethod
    def _dims_ok(cls, v):
        if min(v) < 1:
            raise ValueError("dims must be >= 1")
        return v

    @field_validator("spacing")
    @classmethod
    def _spacing_ok(cls, v):
        if min(v) <= 0:
            raise ValueError("spacing must be > 0")
        return v

    def extent_mm(self) -> Triple:
        return tuple(n * s for n, s in zip(self.dims, self.spacing))


class ContrastParams(_Strict):
    gain: float = Field(1.0, gt=0)
    offset: float = 0.0
    gamma: float = Field(1.0, gt=0)


class SequenceProfile(_Strict):
    name: str
    contrast_map: Dict[str, ContrastParams]
    noise_sigma: float = Field(0.0, ge=0)
    blur_fwhm: float = Field(0.0, ge=0, description="mm")
    gain_jitter: float = Field(0.0, ge=0, lt=1, description="per-scan receiver gain spread (fraction)")

    @field_validator("contrast_map")
    @classmethod
    def _all_classes(cls, v):
        missing = [c for c in FRUIT_CLASSES if c not in v]
        if missing:
            raise ValueError(f"contrast_map missing classes: {missing}")
        return v


# ── learner / calibration ─────────────────────────────────────────────────────

class HyperParams(_Strict):
    model_config = ConfigDict(extra="forbid", frozen=True)

    max_depth: int = Field(3, ge=1)
    learning_rate: float = Field(0.3, gt=0, le=1)
    n_estimators: int = Field(100, ge=1)
    l2_reg: float = Field(1.0, ge=0)
    min_child_weight: float = Field(1.0, ge=0)
    subsample: float = Field(1.0, gt=0, le=1)


class CalibrationParams(_Strict):
    method: Literal["none", "TS", "ETS"] = "none"
    temperature: Optional[float] = None
    weights: Optional[Triple] = None

    @model_validator(mode="after")
    def _check(self):
        if self.method == "none":
            if self.temperature is not None or self.weights is not None:
                raise ValueError("method 'none' carries no parameters")
            return self
        if self.temperature is None or self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if self.method == "TS" and self.weights is not None:
            raise ValueError("TS carries no weights")
        if self.method == "ETS":
            if self.weights is None:
                raise ValueError("ETS needs weights")
            if min(self.weights) < 0 or abs(sum(self.weights) - 1.0) > 1e-9:
                raise ValueError("ETS weights must be >= 0 and sum to 1")
        return self


# ── run config ────────────────────────────────────────────────────────────────

class PhantomConfig(_Strict):
    seed: int = 42
    dims: Tuple[int, int, int] = (96, 96, 48)
    spacing: Triple = (1.0, 1.0, 2.0)
    jitter_mm: float = Field(5.0, ge=0)
    jitter_deg: float = Field(10.0, ge=0)
    max_retries: int = Field(200, ge=1)
    rotation_axis: Literal["x", "y", "z"] = "z"
    layout: Optional[PhantomLayout] = None


class SequencesConfig(_Strict):
    profiles: Dict[str, SequenceProfile] = Field(default_factory=dict)

    @field_validator("profiles")
    @classmethod
    def _known(cls, v):
        unknown = [k for k in v if k not in SEQUENCES]
        if unknown:
            raise ValueError(f"unknown sequences: {unknown}")
        return v


class SegmentationConfig(_Strict):
    p_obs: float = Field(0.25, ge=0, le=1)
    percentile_a: float = Field(80.0, ge=0, le=100)
    percentile_b: float = Field(60.0, ge=0, le=100)
    observer_jitter: float = Field(5.0, ge=0)
    fraction: float = Field(0.5, gt=0, le=1)
    gradient_sigma: float = Field(1.0, gt=0, description="voxels")


class ExtractionConfig(_Strict):
    binning: Literal["count", "width"] = "count"
    bins: int = Field(32, ge=1)
    bin_width: float = Field(25.0, gt=0)


class RobustnessConfig(_Strict):
    ccc_threshold: float = Field(0.9, ge=-1, le=1)
    seg_type: Literal["full_A", "full_B", "partial"] = "partial"


class ParamGrid(_Strict):
    max_depth: List[int] = Field(default_factory=lambda: [2, 3, 4])
    learning_rate: List[float] = Field(default_factory=lambda: [0.1, 0.3])
    n_estimators: List[int] = Field(default_factory=lambda: [50, 100])
    l2_reg: List[float] = Field(default_factory=lambda: [0.0, 1.0])


class LearnerConfig(_Strict):
    grid: ParamGrid = Field(default_factory=ParamGrid)
    folds: int = Field(5, ge=2)
    min_child_weight: float = Field(1.0, ge=0)
    subsample: float = Field(1.0, gt=0, le=1)


class EvaluationConfig(_Strict):
    ece_bins: int = Field(10, ge=1)
    calibration: Literal["none", "TS", "ETS"] = "TS"


class ScenarioSpec(_Strict):
    name: str
    family: Literal["inter_observer", "cross_protocol", "compound", "protocol_diversity"]
    train_sequences: List[str] = Field(default_factory=lambda: list(SEQUENCES))
    test_sequences: List[str] = Field(default_factory=lambda: list(SEQUENCES))
    feature_set: Literal["consistent", "sequence_specific", "all"] = "consistent"
    # sequence_specific only: take the robust set of this sequence instead of the training sequences
    feature_sequence: Optional[str] = None
    augment: bool = False
    seeds: List[int] = Field(default_factory=lambda: [0])
    calibration: Optional[Literal["none", "TS", "ETS"]] = None
    max_train_sequences: int = Field(4, ge=1, le=4)

    @field_validator("train_sequences", "test_sequences")
    @classmethod
    def _sequences(cls, v):
        unknown = [s for s in v if s not in SEQUENCES]
        if unknown:
            raise ValueError(f"unknown sequences: {unknown}")
        if not v:
            raise ValueError("at least one sequence required")
        return list(dict.fromkeys(v))

    @field_validator("seeds")
    @classmethod
    def _seeds(cls, v):
        if not v:
            raise ValueError("at least one seed required")
        return v

    @model_validator(mode="after")
    def _feature_sequence(self):
        if self.feature_sequence is None:
            return self
        if self.feature_sequence not in SEQUENCES:
            raise ValueError(f"unknown feature_sequence {self.feature_sequence!r}")
        if self.feature_set != "sequence_specific":
            raise ValueError("feature_sequence needs feature_set=sequence_specific")
        return self


def default_scenarios() -> List[ScenarioSpec]:
    return [
        ScenarioSpec(name="inter_observer_consistent", family="inter_observer", feature_set="consistent"),
        ScenarioSpec(name="inter_observer_all", family="inter_observer", feature_set="all"),
        ScenarioSpec(name="cross_protocol_t2map_consistent", family="cross_protocol",
                     train_sequences=["T2-MAP"], feature_set="consistent"),
        ScenarioSpec(name="cross_protocol_t2map_all", family="cross_protocol",
                     train_sequences=["T2-MAP"], feature_set="all"),
        ScenarioSpec(name="compound_t1tse_consistent", family="compound",
                     train_sequences=["T1-TSE"], feature_set="consistent"),
        ScenarioSpec(name="compound_t1tse_consistent_augmented", family="compound",
                     train_sequences=["T1-TSE"], feature_set="consistent", augment=True),
        ScenarioSpec(name="protocol_diversity_consistent", family="protocol_diversity",
                     feature_set="consistent", seeds=[0, 1, 2, 3, 4]),
    ]


class RunConfig(_Strict):
    phantom: PhantomConfig = Field(default_factory=PhantomConfig)
    sequences: SequencesConfig = Field(default_factory=SequencesConfig)
    segmentation: SegmentationConfig = Field(default_factory=SegmentationConfig)
    extraction: ExtractionConfig = Field(default_factory=ExtractionConfig)
    robustness: RobustnessConfig = Field(default_factory=RobustnessConfig)
    learner: LearnerConfig = Field(default_factory=LearnerConfig)
    evaluation: EvaluationConfig = Field(default_factory=EvaluationConfig)
    scenarios: List[ScenarioSpec] = Field(default_factory=default_scenarios)
    output_dir: str = "runs/default"

    @field_validator("scenarios")
    @classmethod
    def _unique_names(cls, v):
        names = [s.name for s in v]
        dupes = sorted({n for n in names if names.count(n) > 1})
        if dupes:
            raise ValueError(f"duplicate scenario names: {dupes}")
        return v
