"""Run configuration shared by the train, simulate and layout commands."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, model_validator

from .cpu_optimizer import AdamHyper
from .engine import EngineOptions
from .memory_model import ModelSpec


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class ModelConfig(_Strict):
    num_layers: int = Field(4, ge=1)
    hidden_size: int = Field(32, ge=1)
    ffn_size: int = Field(64, ge=1)
    vocab_size: int = Field(32, ge=2)
    num_heads: int = Field(1, ge=1)
    tied_embeddings: bool = False

    def spec(self) -> ModelSpec:
        return ModelSpec(self.num_layers, self.hidden_size, self.ffn_size, self.vocab_size,
                         self.num_heads, tied_embeddings=self.tied_embeddings)


class EngineConfig(_Strict):
    k_ckpt: int = Field(2, ge=1)
    k_slab: int = Field(12, ge=1)
    double_buffering: bool = True
    scheduler: Literal["serial", "overlapped"] = "serial"
    strict: bool = False
    anchors_on_host: bool = False
    arena_capacity: int | None = Field(None, ge=0)

    def options(self) -> EngineOptions:
        return EngineOptions(k_ckpt=self.k_ckpt, k_slab=self.k_slab,
                             double_buffering=self.double_buffering, scheduler=self.scheduler,
                             strict=self.strict, anchors_on_host=self.anchors_on_host,
                             arena_capacity=self.arena_capacity)


class OptimizerConfig(_Strict):
    lr: float = Field(1e-2, ge=0)
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    eps: float = Field(1e-8, gt=0)

    def hyper(self) -> AdamHyper:
        return AdamHyper(self.lr, self.beta1, self.beta2, self.eps)


class DataConfig(_Strict):
    task: Literal["copy", "reverse"] = "copy"
    seed: int = 0
    tokens: int = Field(64, ge=1)
    steps: int = Field(50, ge=0)
    init_seed: int = 0


class SimConfig(_Strict):
    fragmented: bool = False
    latency_ns: int = Field(10_000, ge=0)
    variant: Literal["alg1", "interleaved"] = "alg1"
    tokens: int | None = Field(None, ge=1)


class RunConfig(_Strict):
    model: ModelConfig = ModelConfig()
    engine: EngineConfig = EngineConfig()
    optimizer: OptimizerConfig = OptimizerConfig()
    data: DataConfig = DataConfig()
    sim: SimConfig = SimConfig()
    profile: str = "GH200"
    out: str = "runs"

    @model_validator(mode="after")
    def _check(self):
        if self.engine.k_ckpt > self.model.num_layers:
            raise ValueError(f"engine.k_ckpt={self.engine.k_ckpt} exceeds "
                             f"model.num_layers={self.model.num_layers}")
        if self.model.hidden_size % self.model.num_heads:
            raise ValueError("model.num_heads must divide model.hidden_size")
        return self


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    return RunConfig.model_validate(json.loads(Path(path).read_text()))
