"""Experiment configuration: a versioned JSON document validated with pydantic.

Unknown keys are rejected at every level so that a typo cannot silently
fall back to a default.
"""
from __future__ import annotations

import json
import zlib
from pathlib import Path

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class CorpusCfg(_Strict):
    test_speakers: int = 8
    dev_speakers: int = 8
    asv_speakers: int = 32
    utts_per_speaker: int = Field(20, ge=3)
    duration_s: float = Field(1.5, ge=0.5, le=5.0)
    n_attack_pairs: int = Field(50, ge=1)


class AsvCfg(_Strict):
    steps: int = 800
    batch_speakers: int = 16
    crop_frames: int = 100
    lr: float = 0.005
    lr_decay_every: int = 300
    channels: int = 32
    n_filters: int = 24
    noise_prob: float = 0.8
    noise_snr: tuple[float, float] = (10.0, 50.0)
    substitute_channels: int = 24


class AttackCfg(_Strict):
    bim_grid: list[int] = [5, 10, 20, 50]
    bim_alpha: float = 1.0
    pgd_grid: list[int] = [5, 10, 20, 50]
    pgd_alpha: float = 300.0
    cw_kappa: list[float] = [0.0, 0.2, 0.4]
    cw_n_iter: int = 30
    cw_n_binary_search: int = 5
    cw_trials: int = 40  # CW runs on the first trials of the attack list only
    purification_n: int = 200
    blackbox_grid: list[int] = [5, 50]
    chunk: int = 25

    @field_validator("bim_grid", "pgd_grid", "blackbox_grid")
    @classmethod
    def _sorted(cls, v):
        if list(v) != sorted(v) or any(n < 0 for n in v):
            raise ValueError("grids must be ascending and non-negative")
        return v


class SearchCfg(_Strict):
    runs: int = 10
    batch: int = 32
    crop_frames: int = 100
    max_iter: int = 12
    d_upper: float = 1e5


class LmdCfg(_Strict):
    variants: dict[str, float] = {"aibm": 15.0}  # name -> lambda_b
    steps: int = 800
    batch: int = 16
    crop_frames: int = 100
    lr: float = 0.002
    lr_decay: float = 0.9
    decay_every: int = 200
    val_every: int = 100
    m: float = 0.05
    lambda_s: float = 1.0


class EvalCfg(_Strict):
    far_grid: list[float] = [0.01, 0.05, 0.1, 0.2]
    snr_budgets: list[float] = [20.0, 30.0, 40.0, 45.0, 50.0, 55.0, 60.0, 70.0]
    budget_mode: str = "or"
    min_dcf_p: float = 0.01

    @field_validator("budget_mode")
    @classmethod
    def _mode(cls, v):
        if v not in ("or", "and"):
            raise ValueError("budget_mode must be 'or' or 'and'")
        return v


class ExperimentConfig(_Strict):
    schema_version: int = SCHEMA_VERSION
    seed: int = 0
    corpus: CorpusCfg = CorpusCfg()
    asv: AsvCfg = AsvCfg()
    attack: AttackCfg = AttackCfg()
    search: SearchCfg = SearchCfg()
    lmd: LmdCfg = LmdCfg()
    evaluate: EvalCfg = EvalCfg()
    exclude_failed_adv: bool = False

    @field_validator("schema_version")
    @classmethod
    def _version(cls, v):
        if v != SCHEMA_VERSION:
            raise ValueError(f"unsupported schema_version {v} (expected {SCHEMA_VERSION})")
        return v

    def to_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        try:
            return cls.model_validate(json.loads(text))
        except (ValidationError, json.JSONDecodeError) as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from exc
        return cls.from_json(text)

    def with_overrides(self, **kw) -> "ExperimentConfig":
        d = self.model_dump()
        d.update({k: v for k, v in kw.items() if v is not None})
        return ExperimentConfig.model_validate(d)


def desk_preset() -> ExperimentConfig:
    return ExperimentConfig()


def tiny_preset() -> ExperimentConfig:
    """Seconds-scale smoke configuration (used by the reproducibility check)."""
    return ExperimentConfig(
        corpus=CorpusCfg(test_speakers=3, dev_speakers=3, asv_speakers=4, utts_per_speaker=4,
                         duration_s=0.6, n_attack_pairs=3),
        asv=AsvCfg(steps=10, batch_speakers=4, crop_frames=40, substitute_channels=8, channels=8),
        attack=AttackCfg(bim_grid=[1, 2], pgd_grid=[1, 2], cw_kappa=[0.0, 0.2], cw_n_iter=3,
                         cw_n_binary_search=2, cw_trials=4, purification_n=3, blackbox_grid=[2], chunk=4),
        search=SearchCfg(runs=2, batch=4, crop_frames=40, max_iter=3),
        lmd=LmdCfg(steps=4, batch=4, crop_frames=40, decay_every=2, val_every=2),
        evaluate=EvalCfg(far_grid=[0.1], snr_budgets=[30.0, 60.0]),
    )


PRESETS = {"desk": desk_preset, "tiny": tiny_preset}


def derive_seed(root: int, stage: str, index: int = 0) -> int:
    """Named seed derivation: one independent stream per (stage, index)."""
    ss = np.random.SeedSequence([int(root) & 0xFFFFFFFF, zlib.crc32(stage.encode()), int(index)])
    return int(ss.generate_state(1)[0])
