"""Run configuration: one dataclass tree mirrored by the JSON config files.

Every knob of a run lives here so the manifest can echo it verbatim and two
runs with equal configs are bit-identical.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from .data import GeneratorConfig
from .errors import ContractError

FUSION_MODES = ("multiplicative", "additive", "mul", "add")


@dataclass
class RunConfig:
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)

    # model
    encoder_hidden: tuple[int, ...] = ()
    output_dim: int = 20
    encoder_init: str = "identity"          # identity | random
    head2d_mode: str = "cosine"
    head3d_mode: str = "cosine"
    head_scale: float = 0.25
    use_view_attention: bool = False
    view_attention_delta: float = 0.5
    view_attention_hidden: int = 32

    # losses
    irm_lambda: float = 5.0
    align_alpha: float = 1.0
    align_tau: float = 2.0
    irm_variant: str = "v_rex"              # irmv1 | mm_rex | v_rex
    inv_theta: float = 5.0                  # similarity multiplier inside the
                                            # invariance risk; irmv1 pins it at 1
    rex_lambda_min: float = 0.0
    rex_beta: float = 1.0
    include_25d: bool = False

    # fusion (inference-time only)
    fusion_phi: float = 1.0
    fusion_mode: str = "multiplicative"

    # mining
    mining_rho: float = 0.25
    posterior_p2: float = 0.5
    posterior_p3: float = 0.5
    mining_warmup: int = 5
    mining_period: int = 1
    mining_topk: int = 5

    # optimizer
    base_lr: float = 0.01
    weight_decay: float = 1e-4
    momentum: float = 0.9
    epochs: int = 50
    batch_size: int = 32

    # ablation switches
    enable_step1: bool = True
    enable_step2: bool = True
    enable_align: bool = True
    invariance_on_all: bool = False

    n_3d_augments: int = 1
    seed: int = 0

    def __post_init__(self):
        self.encoder_hidden = tuple(self.encoder_hidden)
        if self.encoder_init not in ("identity", "random"):
            raise ContractError(f"unknown encoder init {self.encoder_init!r}")
        if self.encoder_init == "identity":
            if self.encoder_hidden:
                raise ContractError("identity init implies a single affine stage")
            if self.output_dim != self.generator.dim:
                raise ContractError(
                    f"identity init needs output_dim == feature dim "
                    f"({self.generator.dim}), got {self.output_dim}"
                )
        for mode in (self.head2d_mode, self.head3d_mode):
            if mode not in ("cosine", "affine"):
                raise ContractError(f"unknown head mode {mode!r}")
        if self.fusion_mode not in FUSION_MODES:
            raise ContractError(f"unknown fusion mode {self.fusion_mode!r}")
        if self.enable_step2 and not self.enable_step1 and not self.invariance_on_all:
            raise ContractError(
                "invariance learning operates on mined samples; enable step 1 "
                "or set invariance_on_all"
            )
        if not (0.0 < self.mining_rho <= 1.0):
            raise ContractError("mining_rho must lie in (0, 1]")
        if self.epochs < 1 or self.batch_size < 1:
            raise ContractError("epochs and batch_size must be positive")
        if self.n_3d_augments < 1:
            raise ContractError("need at least one augmented 3D copy")

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["encoder_hidden"] = list(self.encoder_hidden)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        data = dict(data)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ContractError(f"unknown config keys: {sorted(unknown)}")
        gen = data.pop("generator", None)
        if gen is not None and not isinstance(gen, GeneratorConfig):
            gen_known = {f.name for f in dataclasses.fields(GeneratorConfig)}
            gen_unknown = set(gen) - gen_known
            if gen_unknown:
                raise ContractError(f"unknown generator keys: {sorted(gen_unknown)}")
            gen = GeneratorConfig(**gen)
        kwargs = dict(data)
        if gen is not None:
            kwargs["generator"] = gen
        return cls(**kwargs)

    def replace(self, **overrides) -> "RunConfig":
        return dataclasses.replace(self, **overrides)


def load_config(path: str) -> RunConfig:
    with open(path) as fh:
        return RunConfig.from_dict(json.load(fh))


def save_config(cfg: RunConfig, path: str) -> None:
    with open(path, "w") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def canonical_json(data) -> str:
    return json.dumps(data, sort_keys=True, separators=(",", ":"))
