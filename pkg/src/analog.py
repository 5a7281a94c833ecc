import logging
from typing import Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from src.device import MarginSource, source_margin

logger = logging.getLogger(__name__)


class AnalogConfig(BaseModel):
    """
    Margin-extraction chain: clamps, subtracting mirror, TIA (r_ref, W4/W3)
    and a unity-gain source follower whose level shift lives in vm_offset.
    """
    model_config = ConfigDict(frozen=True, extra="forbid", allow_inf_nan=False)

    r_ref: float = Field(default=100e3, gt=0)
    mirror_gain: float = Field(default=1.0, gt=0)
    vm_offset: float = 0.0
    vm_noise_sigma: float = Field(default=0.0, ge=0)
    clamp_error: float = 0.0

    @property
    def is_ideal(self) -> bool:
        return self.vm_offset == 0 and self.vm_noise_sigma == 0 and self.clamp_error == 0


def effective_bias(cfg: AnalogConfig, v_ref: float) -> Tuple[float, bool]:
    """Bias actually regulated onto the reference MTJs, and whether it was clamped to 0."""
    if not v_ref >= 0:
        raise ValueError(f"v_ref must be >= 0 V, got {v_ref}")
    bias = v_ref + cfg.clamp_error
    if bias < 0:
        return 0.0, True
    return bias, False


def extract_vm(cfg: AnalogConfig, p: MarginSource, v_ref: float,
               rng: Optional[np.random.Generator] = None) -> float:
    """
    Margin voltage V_M = r_ref * mirror_gain * I_M + offset + noise, evaluated
    quasi-statically at the current v_ref.
    """
    bias, clamped = effective_bias(cfg, v_ref)
    if clamped:
        logger.debug(f"Clamp error {cfg.clamp_error} drives bias below 0 at v_ref={v_ref}; using 0 V")

    v_m = cfg.r_ref * cfg.mirror_gain * source_margin(p, bias) + cfg.vm_offset

    if cfg.vm_noise_sigma > 0:
        if rng is None:
            raise ValueError("vm_noise_sigma > 0 requires a random stream")
        v_m += rng.normal(0.0, cfg.vm_noise_sigma)
    return v_m
