import logging
import math
from collections import OrderedDict
from dataclasses import dataclass
from enum import Enum
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.stats import norm

from src.analog import AnalogConfig
from src.controller import DboConfig
from src.device import (
    DeviceParams, ReferencePair, ThermalModel, ap_current_curve, cell_currents,
    pair_reference_current, params_at,
)
from src.engine import run_block, steady_v_ref

logger = logging.getLogger(__name__)

TRUNCATION_SIGMAS = 4.0
FLOOR_FRACTION = 0.1


class VariationSpec(BaseModel):
    """
    Process-variation population. Defaults describe the full 1 Mb macro:
    64 blocks of 512 rows x 32 data bit-lines, 2 reference bit-lines each.
    """
    model_config = ConfigDict(frozen=True, extra="forbid", allow_inf_nan=False)

    sigma_over_mu_tmr0: float = Field(default=0.05, ge=0)
    sigma_over_mu_vh: float = Field(default=0.05, ge=0)
    sigma_over_mu_rp: float = Field(default=0.0, ge=0)
    sa_offset_sigma: float = Field(default=1e-6, gt=0)
    n_cells: int = Field(default=1_048_576, ge=1)
    n_blocks: int = Field(default=64, ge=1)
    rows: int = Field(default=512, ge=1)
    data_bl: int = Field(default=32, ge=1)
    ref_bl: int = Field(default=2, ge=2)
    temperature: float = 25.0
    seed: int = 0
    block_sigma_over_mu: float = Field(default=0.0, ge=0)
    tmr0_vh_correlation: float = Field(default=0.0, gt=-1, lt=1)
    dbo_cycles: int = Field(default=200, ge=1)

    @model_validator(mode="after")
    def _check_capacity(self) -> "VariationSpec":
        capacity = self.n_blocks * self.cells_per_block
        if self.n_cells > capacity:
            raise ValueError(
                f"n_cells ({self.n_cells}) exceeds {self.n_blocks} blocks x {self.cells_per_block} data cells"
            )
        return self

    @property
    def cells_per_block(self) -> int:
        return self.rows * self.data_bl

    def block_sizes(self) -> List[int]:
        """Data cells evaluated per block; the first blocks take the remainder."""
        q, r = divmod(self.n_cells, self.n_blocks)
        return [q + (1 if b < r else 0) for b in range(self.n_blocks)]


@dataclass(frozen=True)
class BlockSample:
    """One block's reference pair plus its data-cell parameter arrays."""
    block: int
    ref_pair: ReferencePair
    tmr0: np.ndarray
    vh: np.ndarray
    rp: np.ndarray

    def __len__(self) -> int:
        return int(self.tmr0.size)

    def cell(self, i: int) -> DeviceParams:
        return DeviceParams(tmr0=float(self.tmr0[i]), vh=float(self.vh[i]), rp=float(self.rp[i]))


class ModeKind(str, Enum):
    DBO = "DBO"
    FIXED = "FIXED"


class ReadMode(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid", allow_inf_nan=False)

    kind: ModeKind
    v_read: Optional[float] = Field(default=None, ge=0)

    @model_validator(mode="after")
    def _check_bias(self) -> "ReadMode":
        if self.kind is ModeKind.FIXED and self.v_read is None:
            raise ValueError("FIXED mode needs a read bias")
        if self.kind is ModeKind.DBO and self.v_read is not None:
            raise ValueError("DBO mode chooses its own read bias")
        return self

    @classmethod
    def dbo(cls) -> "ReadMode":
        return cls(kind=ModeKind.DBO)

    @classmethod
    def fixed(cls, v_read: float) -> "ReadMode":
        return cls(kind=ModeKind.FIXED, v_read=v_read)

    @property
    def label(self) -> str:
        return self.kind.value


class BerResult(BaseModel):
    model_config = ConfigDict(frozen=True)

    mode: ReadMode
    # Bias actually used: the FIXED constant, or the block-averaged DBO steady-state bias
    v_read: float
    temp_c: float
    sigma_mu_tmr0: float
    sigma_mu_vh: float
    ber: float = Field(ge=0, le=1)
    stderr: float = Field(ge=0)
    n_cells_evaluated: int


class OperationBer(BaseModel):
    mode: str
    v_read: Optional[float]
    sigma_mu_tmr0: float
    sigma_mu_vh: float
    operation_ber: float
    worst_temp_c: float


def _truncated(rng: np.random.Generator, shape) -> np.ndarray:
    return np.clip(rng.standard_normal(shape), -TRUNCATION_SIGMAS, TRUNCATION_SIGMAS)


def _scale(mean, sigma_over_mu: float, z: np.ndarray) -> np.ndarray:
    return np.maximum(mean * (1.0 + sigma_over_mu * z), FLOOR_FRACTION * mean)


def sample_block(spec: VariationSpec, base: DeviceParams, rng: np.random.Generator,
                 n_cells: Optional[int] = None, block: int = 0) -> BlockSample:
    """
    Draw a block's two reference cells followed by its data cells.
    Each parameter is Gaussian around the block mean, clipped at 4 sigma and
    floored at 10 % of the mean.
    """
    n = spec.cells_per_block if n_cells is None else n_cells
    if n < 0:
        raise ValueError(f"n_cells must be >= 0, got {n}")

    # 1. Block-level shift of the means (die-level discrepancy between blocks)
    tmr0_mu, vh_mu = base.tmr0, base.vh
    if spec.block_sigma_over_mu > 0:
        zb = _truncated(rng, 2)
        tmr0_mu = float(_scale(tmr0_mu, spec.block_sigma_over_mu, zb[0]))
        vh_mu = float(_scale(vh_mu, spec.block_sigma_over_mu, zb[1]))

    # 2. Reference pair (index 0 = P cell, 1 = AP cell) and data cells in one draw
    z = _truncated(rng, (3, n + 2))
    rho = spec.tmr0_vh_correlation
    z_vh = rho * z[0] + math.sqrt(1.0 - rho * rho) * z[1]

    tmr0 = _scale(tmr0_mu, spec.sigma_over_mu_tmr0, z[0])
    vh = _scale(vh_mu, spec.sigma_over_mu_vh, np.clip(z_vh, -TRUNCATION_SIGMAS, TRUNCATION_SIGMAS))
    rp = _scale(base.rp, spec.sigma_over_mu_rp, z[2])

    refs = [DeviceParams(tmr0=float(tmr0[i]), vh=float(vh[i]), rp=float(rp[i])) for i in (0, 1)]
    return BlockSample(
        block=block,
        ref_pair=ReferencePair(p_cell=refs[0], ap_cell=refs[1]),
        tmr0=tmr0[2:], vh=vh[2:], rp=rp[2:],
    )


def _as_pair(ref_pair: Union[ReferencePair, Tuple[DeviceParams, DeviceParams]]) -> ReferencePair:
    if isinstance(ref_pair, ReferencePair):
        return ref_pair
    p_cell, ap_cell = ref_pair
    return ReferencePair(p_cell=p_cell, ap_cell=ap_cell)


def _check_read(v_read: float, sa_sigma: float) -> None:
    if not (math.isfinite(v_read) and v_read >= 0):
        raise ValueError(f"v_read must be finite and >= 0, got {v_read}")
    if not (math.isfinite(sa_sigma) and sa_sigma > 0):
        raise ValueError(f"sa_sigma must be finite and > 0, got {sa_sigma}")


def cell_error_prob(cell: DeviceParams,
                    ref_pair: Union[ReferencePair, Tuple[DeviceParams, DeviceParams]],
                    v_read: float, sa_sigma: float) -> float:
    """
    Probability that one read of an equiprobable stored bit is wrong when the
    sense amplifier adds a Gaussian input-referred offset of sigma sa_sigma.
    """
    _check_read(v_read, sa_sigma)
    i_ref = pair_reference_current(_as_pair(ref_pair), v_read)
    i_p, i_ap = cell_currents(cell, v_read)
    return 0.5 * norm.sf((i_p - i_ref) / sa_sigma) + 0.5 * norm.sf((i_ref - i_ap) / sa_sigma)


def _cell_margins(sample: BlockSample, v_read: float) -> Tuple[np.ndarray, np.ndarray]:
    """Per-cell (i_p - i_ref, i_ref - i_ap) at v_read."""
    i_ref = pair_reference_current(sample.ref_pair, v_read)
    i_p = v_read / sample.rp
    i_ap = ap_current_curve(sample.tmr0, sample.vh, sample.rp, v_read)
    return i_p - i_ref, i_ref - i_ap


def cell_error_probs(sample: BlockSample, v_read: float, sa_sigma: float) -> np.ndarray:
    """Vectorized cell_error_prob over a block's data cells."""
    _check_read(v_read, sa_sigma)
    m1, m0 = _cell_margins(sample, v_read)
    return 0.5 * norm.sf(m1 / sa_sigma) + 0.5 * norm.sf(m0 / sa_sigma)


def block_rngs(seed: int, block: int) -> Tuple[np.random.Generator, np.random.Generator]:
    """(population stream, DBO stream) of one block."""
    return np.random.default_rng([seed, block, 0]), np.random.default_rng([seed, block, 1])


def _population(spec: VariationSpec, tm: ThermalModel, mode: ReadMode,
                dbo_cfg: Optional[DboConfig], analog_cfg: Optional[AnalogConfig]):
    """Yield (BlockSample, v_read) for every non-empty block."""
    base = params_at(tm, spec.temperature)
    if mode.kind is ModeKind.DBO:
        dbo_cfg = dbo_cfg or DboConfig()
        analog_cfg = analog_cfg or AnalogConfig()

    for b, n_b in enumerate(spec.block_sizes()):
        if n_b == 0:
            continue
        pop_rng, dbo_rng = block_rngs(spec.seed, b)
        sample = sample_block(spec, base, pop_rng, n_cells=n_b, block=b)
        if mode.kind is ModeKind.FIXED:
            v_read = mode.v_read
        else:
            records = run_block(sample.ref_pair, analog_cfg, dbo_cfg, spec.dbo_cycles,
                                dbo_rng, temperature=spec.temperature)
            v_read = steady_v_ref(records)
        yield sample, v_read


def estimate_ber(spec: VariationSpec, tm: ThermalModel, mode: ReadMode,
                 dbo_cfg: Optional[DboConfig] = None,
                 analog_cfg: Optional[AnalogConfig] = None) -> BerResult:
    """Semi-analytic BER: mean per-cell error probability over the sampled macro."""
    probs: List[np.ndarray] = []
    biases: List[float] = []
    for sample, v_read in _population(spec, tm, mode, dbo_cfg, analog_cfg):
        probs.append(cell_error_probs(sample, v_read, spec.sa_offset_sigma))
        biases.append(v_read)

    p = np.concatenate(probs)
    n = int(p.size)
    ber = math.fsum(p) / n
    if n > 1:
        var = math.fsum((p - ber) ** 2) / (n - 1)
        stderr = math.sqrt(var / n)
    else:
        stderr = 0.0

    result = BerResult(
        mode=mode,
        v_read=math.fsum(biases) / len(biases),
        temp_c=spec.temperature,
        sigma_mu_tmr0=spec.sigma_over_mu_tmr0,
        sigma_mu_vh=spec.sigma_over_mu_vh,
        ber=min(max(ber, 0.0), 1.0),
        stderr=stderr,
        n_cells_evaluated=n,
    )
    logger.debug(f"BER {mode.label} @ {spec.temperature} C, sigma/mu={spec.sigma_over_mu_tmr0}: "
                 f"{result.ber:.3e} +/- {result.stderr:.1e}")
    return result


def sample_ber_direct(spec: VariationSpec, tm: ThermalModel, mode: ReadMode, reads: int,
                      rng: np.random.Generator,
                      dbo_cfg: Optional[DboConfig] = None,
                      analog_cfg: Optional[AnalogConfig] = None,
                      chunk: int = 1_000_000) -> BerResult:
    """
    Brute-force reads over the same population estimate_ber sees: pick a cell
    and a stored bit, add one offset draw, count wrong decisions.
    """
    if reads < 1:
        raise ValueError(f"reads must be >= 1, got {reads}")

    m1_parts, m0_parts, biases = [], [], []
    for sample, v_read in _population(spec, tm, mode, dbo_cfg, analog_cfg):
        m1, m0 = _cell_margins(sample, v_read)
        m1_parts.append(m1)
        m0_parts.append(m0)
        biases.append(v_read)
    m1 = np.concatenate(m1_parts)
    m0 = np.concatenate(m0_parts)

    errors = 0
    done = 0
    while done < reads:
        size = min(chunk, reads - done)
        idx = rng.integers(0, m1.size, size)
        bit = rng.integers(0, 2, size).astype(bool)
        offset = rng.normal(0.0, spec.sa_offset_sigma, size)
        # Stored 1 (P) is misread when the offset pulls it below the reference; stored 0 the other way
        wrong = np.where(bit, m1[idx] + offset < 0, offset > m0[idx])
        errors += int(np.count_nonzero(wrong))
        done += size

    ber = errors / reads
    return BerResult(
        mode=mode,
        v_read=math.fsum(biases) / len(biases),
        temp_c=spec.temperature,
        sigma_mu_tmr0=spec.sigma_over_mu_tmr0,
        sigma_mu_vh=spec.sigma_over_mu_vh,
        ber=ber,
        stderr=math.sqrt(ber * (1.0 - ber) / reads),
        n_cells_evaluated=int(m1.size),
    )


def operation_ber(results: Sequence[BerResult]) -> List[OperationBer]:
    """Per mode and variation level, the worst BER across the evaluated temperatures."""
    worst: "OrderedDict[tuple, BerResult]" = OrderedDict()
    for r in results:
        key = (r.mode.label, r.mode.v_read, r.sigma_mu_tmr0, r.sigma_mu_vh)
        if key not in worst or r.ber > worst[key].ber:
            worst[key] = r
    return [
        OperationBer(mode=k[0], v_read=k[1], sigma_mu_tmr0=k[2], sigma_mu_vh=k[3],
                     operation_ber=r.ber, worst_temp_c=r.temp_c)
        for k, r in worst.items()
    ]
