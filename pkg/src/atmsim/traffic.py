"""Traffic contracts, GCRA conformance, policing, shaping and QoS math.

Rates are cells per second, times are seconds.  The conformance
arithmetic never forces floats: drive it with int/float for speed or
with fractions.Fraction when exact boundary decisions matter.
"""

from __future__ import annotations

import bisect
import enum
import math
import statistics
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

from .cell import Cell
from .errors import OrderingError


class ServiceCategory(enum.Enum):
    CBR = "cbr"
    VBR_RT = "vbr_rt"
    VBR_NRT = "vbr_nrt"
    ABR = "abr"
    UBR = "ubr"


@dataclass(frozen=True)
class TrafficDescriptor:
    """Declared traffic parameters of one connection.

    pcr is mandatory; the rest only where the service category uses them.
    cdvt is the tolerance (seconds) granted on top of peak-rate spacing.
    """

    pcr: float
    cdvt: Optional[float] = None
    scr: Optional[float] = None
    mbs: Optional[int] = None
    mcr: Optional[float] = None

    def __post_init__(self) -> None:
        if self.pcr <= 0:
            raise ValueError("pcr must be positive")
        if self.cdvt is not None and self.cdvt < 0:
            raise ValueError("cdvt must be >= 0")
        if self.scr is not None and not 0 < self.scr <= self.pcr:
            raise ValueError("scr must satisfy 0 < scr <= pcr")
        if self.mbs is not None and self.mbs < 1:
            raise ValueError("mbs must be >= 1")
        if self.mcr is not None and not 0 <= self.mcr <= self.pcr:
            raise ValueError("mcr must satisfy 0 <= mcr <= pcr")


@dataclass(frozen=True)
class QosRequirement:
    """Requested QoS guarantees; every field optional."""

    clr_clp0: Optional[float] = None
    clr_clp1: Optional[float] = None
    max_ctd: Optional[float] = None
    max_cdv: Optional[float] = None

    def __post_init__(self) -> None:
        for name in ("clr_clp0", "clr_clp1"):
            value = getattr(self, name)
            if value is not None and not 0 <= value <= 1:
                raise ValueError(f"{name} must be a ratio in [0, 1]")
        for name in ("max_ctd", "max_cdv"):
            value = getattr(self, name)
            if value is not None and value < 0:
                raise ValueError(f"{name} must be >= 0")


_VBR = (ServiceCategory.VBR_RT, ServiceCategory.VBR_NRT)


def validate_contract(
    category: ServiceCategory,
    descriptor: TrafficDescriptor,
    qos: Optional[QosRequirement] = None,
) -> List[str]:
    """Check descriptor+QoS applicability for a service category.

    Returns a list of human-readable violations; empty means the contract
    is well formed.  Applicability follows the service-category table:
    CBR books peak rate only, VBR declares its sustainable rate and burst
    size, ABR needs a minimum rate (zero is fine), and UBR gets no
    guarantees of any kind.
    """
    if qos is None:
        qos = QosRequirement()
    v: List[str] = []
    cat = category.name

    if category is ServiceCategory.CBR:
        if descriptor.cdvt is None:
            v.append("CBR requires CDVT")
        if descriptor.scr is not None:
            v.append("SCR not applicable for CBR")
        if descriptor.mbs is not None:
            v.append("MBS not applicable for CBR")
        if descriptor.mcr is not None:
            v.append("MCR not applicable for CBR")
    elif category in _VBR:
        if descriptor.scr is None:
            v.append(f"{cat} requires SCR")
        if descriptor.mbs is None:
            v.append(f"{cat} requires MBS")
        if descriptor.mcr is not None:
            v.append(f"MCR not applicable for {cat}")
    elif category is ServiceCategory.ABR:
        if descriptor.mcr is None:
            v.append("ABR requires MCR (zero allowed)")
        if descriptor.scr is not None:
            v.append("SCR not applicable for ABR")
        if descriptor.mbs is not None:
            v.append("MBS not applicable for ABR")
    else:  # UBR
        if descriptor.scr is not None:
            v.append("SCR not applicable for UBR")
        if descriptor.mbs is not None:
            v.append("MBS not applicable for UBR")
        if descriptor.mcr is not None:
            v.append("MCR not applicable for UBR")

    if category is ServiceCategory.UBR:
        for name in ("clr_clp0", "clr_clp1", "max_ctd", "max_cdv"):
            if getattr(qos, name) is not None:
                v.append(f"{name} not applicable for UBR (no QoS guarantees)")
    else:
        if qos.max_ctd is not None and category is ServiceCategory.ABR:
            v.append("max_ctd not applicable for ABR")
        if qos.max_cdv is not None and category not in (
            ServiceCategory.CBR,
            ServiceCategory.VBR_RT,
        ):
            v.append(f"max_cdv only applies to CBR and VBR_RT, not {cat}")
    return v


def burst_tolerance(mbs: int, scr: float, pcr: float) -> float:
    """Tolerance of the sustainable-rate bucket for a given burst size.

    (mbs - 1) * (1/scr - 1/pcr), computed in factored form so the result
    stays exact where the inputs allow it.  With this tolerance, exactly
    mbs back-to-back cells at the peak rate conform.
    """
    if mbs < 1:
        raise ValueError("mbs must be >= 1")
    if not 0 < scr <= pcr:
        raise ValueError("rates must satisfy 0 < scr <= pcr")
    return (mbs - 1) * (pcr - scr) / (scr * pcr)


@dataclass
class Gcra:
    """Continuous-state leaky bucket.

    The bucket drains at unit rate since the last conforming arrival and
    is floored at zero; an arrival conforms when the drained level is at
    most ``limit`` and then deposits ``increment``.  Non-conforming
    arrivals leave the state untouched.  increment = 1/rate, limit = the
    tolerance (cdvt, or burst tolerance + cdvt for the sustainable-rate
    bucket).
    """

    increment: float
    limit: float
    level: float = 0
    last_time: float = 0

    def drained(self, arrival: float) -> float:
        if arrival < self.last_time:
            raise OrderingError(f"arrival {arrival} before last conformance {self.last_time}")
        down = self.level - (arrival - self.last_time)
        return down if down > 0 else 0

    def conforms(self, arrival: float) -> bool:
        """Would a cell at ``arrival`` conform?  No state change."""
        return self.drained(arrival) <= self.limit

    def update(self, arrival: float) -> bool:
        """Account for a cell at ``arrival``; True when it conforms."""
        down = self.drained(arrival)
        if down > self.limit:
            return False
        self.level = down + self.increment
        self.last_time = arrival
        return True

    def earliest_conforming(self, not_before: float) -> float:
        """Smallest representable time >= not_before at which a cell conforms.

        The algebraic bound last_time + (level - limit) can land one ulp
        short under float rounding, so the result is nudged with nextafter
        until the bucket actually agrees.
        """
        t = not_before
        bound = self.last_time + (self.level - self.limit)
        if bound > t:
            t = bound
        while not self.conforms(t):
            t = math.nextafter(t, math.inf)
        # the bound itself may have rounded up past the true threshold;
        # walk back down to the smallest conforming representable.  Exact
        # numeric types land on the threshold directly and skip this.
        if isinstance(t, float):
            while t > not_before:
                prev = math.nextafter(t, -math.inf)
                if prev < not_before or not self.conforms(prev):
                    break
                t = prev
        return t


def conform_update(buckets: Sequence[Gcra], arrival: float) -> bool:
    """Dual (or n-fold) GCRA: conforming only if every bucket agrees.

    Buckets are only charged when the cell conforms overall, so a cell
    rejected by one bucket does not consume credit in another.
    """
    if all(bucket.conforms(arrival) for bucket in buckets):
        for bucket in buckets:
            bucket.update(arrival)
        return True
    return False


def contract_buckets(descriptor: TrafficDescriptor) -> List[Gcra]:
    """Conformance buckets for a descriptor: peak-rate bucket always,
    plus the sustainable-rate bucket when scr/mbs are declared."""
    cdvt = descriptor.cdvt if descriptor.cdvt is not None else 0.0
    buckets = [Gcra(increment=1.0 / descriptor.pcr, limit=cdvt)]
    if descriptor.scr is not None:
        if descriptor.mbs is None:
            raise ValueError("scr without mbs leaves the burst tolerance undefined")
        bt = burst_tolerance(descriptor.mbs, descriptor.scr, descriptor.pcr)
        buckets.append(Gcra(increment=1.0 / descriptor.scr, limit=bt + cdvt))
    return buckets


class PolicingAction(enum.Enum):
    DROP = "drop"
    TAG_CLP = "tag_clp"


def police(cell: Cell, conforming: bool, action: PolicingAction) -> Optional[Cell]:
    """Usage-parameter-control verdict for one cell.

    Conforming cells pass unchanged.  Non-conforming cells are discarded
    (None) under DROP, or passed with clp=1 under TAG_CLP; the rewritten
    header gets a fresh HEC at serialization time by construction.
    """
    if conforming:
        return cell
    if action is PolicingAction.DROP:
        return None
    if cell.header.clp == 1:
        return cell
    return Cell(replace(cell.header, clp=1), cell.payload)


@dataclass
class Policer:
    """Stateful UPC pipeline: bucket check + police(), with counters."""

    buckets: List[Gcra]
    action: PolicingAction = PolicingAction.DROP
    passed: int = 0
    tagged: int = 0
    dropped: int = 0

    def offer(self, cell: Cell, arrival: float) -> Optional[Cell]:
        conforming = conform_update(self.buckets, arrival)
        out = police(cell, conforming, self.action)
        if out is None:
            self.dropped += 1
        elif conforming:
            self.passed += 1
        else:
            self.tagged += 1
        return out


class Shaper:
    """Open-loop shaper: delays cells to their earliest conforming times.

    Order is preserved; a cell is dropped (and counted) when more than
    ``depth`` cells are already waiting at its arrival instant.  Shaped
    output re-policed with the same buckets is conforming by
    construction.
    """

    def __init__(self, buckets: Sequence[Gcra], depth: int = 1024):
        if depth < 1:
            raise ValueError("depth must be >= 1")
        self.buckets = list(buckets)
        self.depth = depth
        self.overflow = 0
        self._pending: List[float] = []  # release times not yet in the past
        self._last_arrival: Optional[float] = None
        self._last_release: Optional[float] = None

    def offer(self, arrival: float) -> Optional[float]:
        """Release time for a cell arriving now, or None if it overflows."""
        if self._last_arrival is not None and arrival < self._last_arrival:
            raise OrderingError(f"arrival {arrival} precedes {self._last_arrival}")
        self._last_arrival = arrival
        cut = bisect.bisect_right(self._pending, arrival)
        if cut:
            del self._pending[:cut]
        if len(self._pending) >= self.depth:
            self.overflow += 1
            return None
        t = arrival
        if self._last_release is not None and self._last_release > t:
            t = self._last_release
        for bucket in self.buckets:
            t = bucket.earliest_conforming(t)
        while not all(bucket.conforms(t) for bucket in self.buckets):
            t = math.nextafter(t, math.inf)
        for bucket in self.buckets:
            bucket.update(t)
        self._last_release = t
        self._pending.append(t)
        return t


def shape(
    arrivals: Sequence[float], buckets: Sequence[Gcra], depth: int = 1024
) -> Tuple[List[Optional[float]], int]:
    """Shape a whole arrival sequence; returns (release times, overflow count).

    The output list aligns with the input; None marks an overflowed cell.
    """
    shaper = Shaper(buckets, depth=depth)
    releases = [shaper.offer(t) for t in arrivals]
    return releases, shaper.overflow


@dataclass(frozen=True)
class DelayStats:
    count: int
    mean_ctd: float
    max_ctd: float
    cdv_peak_to_peak: float
    cdv_stddev: float


def delay_stats(samples: Sequence[float]) -> Optional[DelayStats]:
    """Transfer-delay statistics; None for an empty sample set.

    Peak-to-peak delay variation is max - min; the spread statistic is
    the population standard deviation.
    """
    if not samples:
        return None
    return DelayStats(
        count=len(samples),
        mean_ctd=statistics.fmean(samples),
        max_ctd=max(samples),
        cdv_peak_to_peak=max(samples) - min(samples),
        cdv_stddev=statistics.pstdev(samples),
    )


@dataclass
class ConnectionMetrics:
    """Per-connection cell accounting, split by loss priority."""

    transmitted_clp0: int = 0
    transmitted_clp1: int = 0
    lost_clp0: int = 0
    lost_clp1: int = 0
    delivered: int = 0
    delay_samples: List[float] = field(default_factory=list)

    @property
    def transmitted(self) -> int:
        return self.transmitted_clp0 + self.transmitted_clp1

    @property
    def lost(self) -> int:
        return self.lost_clp0 + self.lost_clp1

    @property
    def in_flight(self) -> int:
        """Cells still inside the network: transmitted - delivered - lost."""
        return self.transmitted - self.delivered - self.lost


def compute_clr(metrics: ConnectionMetrics, clp: Optional[int] = None) -> float:
    """Cell loss ratio lost/transmitted for one CLP class (None = both).

    Zero transmitted cells give a CLR of 0.0 rather than a division error.
    """
    if clp is None:
        lost, transmitted = metrics.lost, metrics.transmitted
    elif clp == 0:
        lost, transmitted = metrics.lost_clp0, metrics.transmitted_clp0
    elif clp == 1:
        lost, transmitted = metrics.lost_clp1, metrics.transmitted_clp1
    else:
        raise ValueError("clp must be 0, 1 or None")
    if transmitted == 0:
        return 0.0
    return lost / transmitted
