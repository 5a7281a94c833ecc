import logging
import math
from enum import Enum
from typing import Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

logger = logging.getLogger(__name__)


class ControllerInputError(ValueError):
    """Raised when the controller is fed a non-finite margin voltage."""


class Direction(str, Enum):
    UP = "UP"
    DOWN = "DOWN"


class PumpCmd(str, Enum):
    UP_C = "UP_C"
    UP_F = "UP_F"
    DN = "DN"


class DboConfig(BaseModel):
    """Controller constants. Defaults follow the 5 MHz, 80 mV / 4 mV reference design."""
    model_config = ConfigDict(frozen=True, extra="forbid", allow_inf_nan=False)

    fine_step: float = Field(default=0.004, gt=0)
    coarse_ratio: int = Field(default=20, ge=1)
    sample_period: float = Field(default=200e-9, gt=0)
    v_ref_max: float = Field(default=1.0, gt=0)
    v_ref_init: float = Field(default=0.0, ge=0)
    comparator_hysteresis: float = Field(default=0.0, ge=0)
    comparator_offset_sigma: float = Field(default=0.0, ge=0)
    rearm_coarse_after: Optional[int] = Field(default=None, ge=1)

    @model_validator(mode="after")
    def _check_init(self) -> "DboConfig":
        if self.v_ref_init > self.v_ref_max:
            raise ValueError(f"v_ref_init ({self.v_ref_init}) exceeds v_ref_max ({self.v_ref_max})")
        return self

    @property
    def coarse_step(self) -> float:
        return self.coarse_ratio * self.fine_step


class DboState(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    v_ref: float
    v_s: float = 0.0
    direction: Direction = Direction.UP
    coarse: bool = True
    cycle: int = 0
    last_flip_cycle: int = 0
    pump_cmd: Optional[PumpCmd] = None


class CycleRecord(BaseModel):
    """All controller signals of one sample cycle; v_ref is the post-pump value."""
    model_config = ConfigDict(frozen=True)

    cycle: int
    time_s: float
    v_ref: float
    v_m: float
    v_s: float
    flip: bool
    coarse: bool
    pump_cmd: PumpCmd
    direction: Direction
    temperature: Optional[float] = None


def reset(cfg: DboConfig) -> DboState:
    """Power-up state: latches cleared, coarse slewing upward from v_ref_init."""
    return DboState(v_ref=cfg.v_ref_init)


def _pump(cfg: DboConfig, direction: Direction, coarse: bool) -> Tuple[PumpCmd, float]:
    if direction is Direction.DOWN:
        return PumpCmd.DN, -cfg.fine_step
    if coarse:
        return PumpCmd.UP_C, cfg.coarse_step
    return PumpCmd.UP_F, cfg.fine_step


def step(cfg: DboConfig, s: DboState, v_m: float,
         rng: Optional[np.random.Generator] = None,
         temperature: Optional[float] = None) -> Tuple[DboState, CycleRecord]:
    """
    One sample cycle: compare -> flip -> sample/hold -> charge pump -> re-arm.
    v_m must be the margin voltage measured at the current s.v_ref.
    """
    if not math.isfinite(v_m):
        raise ControllerInputError(f"non-finite margin voltage {v_m} at cycle {s.cycle}")

    # 1. Comparator; no held sample exists on the first cycle after reset
    if s.cycle == 0:
        flip = False
    else:
        threshold = cfg.comparator_hysteresis
        if cfg.comparator_offset_sigma > 0:
            if rng is None:
                raise ValueError("comparator_offset_sigma > 0 requires a random stream")
            threshold += rng.normal(0.0, cfg.comparator_offset_sigma)
        flip = v_m < s.v_s - threshold

    # 2. FLIP toggles direction and permanently leaves coarse mode
    direction, coarse, last_flip = s.direction, s.coarse, s.last_flip_cycle
    if flip:
        direction = Direction.DOWN if direction is Direction.UP else Direction.UP
        coarse = False
        last_flip = s.cycle

    # 3. Sample/hold
    v_s = v_m

    # 4. Charge pump
    cmd, delta = _pump(cfg, direction, coarse)
    v_ref = min(max(s.v_ref + delta, 0.0), cfg.v_ref_max)

    # 5. Optional coarse re-arm after a long run without FLIP
    if (cfg.rearm_coarse_after is not None and not coarse
            and s.cycle - last_flip > cfg.rearm_coarse_after):
        coarse = True
        logger.debug(f"Coarse mode re-armed at cycle {s.cycle}")

    # 6. Advance the cycle and emit the record
    cycle = s.cycle + 1
    new_state = s.model_copy(update={
        "v_ref": v_ref,
        "v_s": v_s,
        "direction": direction,
        "coarse": coarse,
        "cycle": cycle,
        "last_flip_cycle": last_flip,
        "pump_cmd": cmd,
    })
    record = CycleRecord(
        cycle=cycle,
        time_s=cycle * cfg.sample_period,
        v_ref=v_ref,
        v_m=v_m,
        v_s=v_s,
        flip=flip,
        coarse=coarse,
        pump_cmd=cmd,
        direction=direction,
        temperature=temperature,
    )
    return new_state, record


class DboController:
    """A single DBO instance: config, mutable state and its own random stream."""

    def __init__(self, cfg: DboConfig, rng: Optional[np.random.Generator] = None,
                 state: Optional[DboState] = None):
        self.cfg = cfg
        self.rng = rng
        self.state = state if state is not None else reset(cfg)
        self.flip_count = 0

    @property
    def v_ref(self) -> float:
        return self.state.v_ref

    def tick(self, v_m: float, temperature: Optional[float] = None) -> CycleRecord:
        self.state, record = step(self.cfg, self.state, v_m, self.rng, temperature)
        if record.flip:
            self.flip_count += 1
            if self.flip_count == 1:
                logger.debug(f"First FLIP at cycle {record.cycle}, v_ref={record.v_ref:.4f} V")
        return record
