"""Deterministic discrete-event simulation of scenario files.

Events are dispatched in (time, insertion sequence) order, so identical
(scenario, seed) pairs replay the exact same event stream and produce
byte-identical reports.  Cells are carried as value objects wrapped in a
TransitCell envelope holding the owning flow, entry time and a per-flow
sequence number; the envelope is simulator bookkeeping and never touches
the wire image.

Node output ports share one mechanism: a bounded OutputQueue feeding a
single-cell transmitter per link direction (424 bits serialized at the
link rate, then the propagation delay).  Queue occupancy therefore
counts waiting cells, with the cell on the wire "in service".
"""

from __future__ import annotations

import enum
import hashlib
import heapq
import json
import math
from dataclasses import dataclass, replace
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .aal5 import Reassembler, ReassemblyError, segment
from .abr import (
    DEFAULT_NRM,
    AbrSourceState,
    EfciObserver,
    FeedbackIndication,
    default_source,
    source_adjust,
)
from .cell import Cell, CellHeader, InterfaceKind
from .errors import OrderingError
from .lane import (
    OP_ARP_REPLY,
    OP_ARP_REQUEST,
    Bus,
    Lec,
    LecPort,
    Les,
    RegistrationConflict,
    atm_address,
    decode_control,
    encode_arp_reply,
    format_mac,
)
from .scenario import (
    ConnectionSpec,
    GeneratorSpec,
    LaneTrafficSpec,
    Scenario,
    load_scenario,
    validate_scenario,
)
from .switch import (
    EnqueueOutcome,
    LinkBooking,
    OutputQueue,
    VcRoute,
    VcTable,
    cac_admit,
    route_cell,
)
from .traffic import (
    ConnectionMetrics,
    ServiceCategory,
    TrafficDescriptor,
    compute_clr,
    delay_stats,
)

CELL_BITS = 424
FIRST_VCI = 32  # low label values left alone, control-plane style


class ScenarioInvalid(ValueError):
    """Preflight failed; .violations lists every problem found."""

    def __init__(self, violations: Sequence[str]):
        super().__init__("; ".join(violations))
        self.violations = list(violations)


class EventKind(enum.Enum):
    CELL_ARRIVAL = "cell_arrival"
    CELL_TRANSMIT_COMPLETE = "cell_transmit_complete"
    GENERATOR_FIRE = "generator_fire"
    FEEDBACK_EPOCH = "feedback_epoch"
    CONTROL_MESSAGE = "control_message"
    TIMER_EXPIRY = "timer_expiry"


@dataclass(frozen=True)
class Event:
    time: float
    seq: int
    kind: EventKind
    fn: Callable[[], None]
    payload: Any = None


class EventQueue:
    """Future event list ordered by (time, insertion sequence)."""

    def __init__(self) -> None:
        self._heap: List[Tuple[float, int, Event]] = []
        self._seq = 0
        self.now = 0.0
        self.processed = 0

    def __len__(self) -> int:
        return len(self._heap)

    def schedule(
        self, time: float, kind: EventKind, fn: Callable[[], None], payload: Any = None
    ) -> Event:
        if time < self.now:
            raise OrderingError(f"cannot schedule at {time} before now {self.now}")
        event = Event(time, self._seq, kind, fn, payload)
        heapq.heappush(self._heap, (time, self._seq, event))
        self._seq += 1
        return event

    def next_time(self) -> Optional[float]:
        return self._heap[0][0] if self._heap else None

    def pop(self) -> Event:
        time, seq, event = heapq.heappop(self._heap)
        self.now = time
        self.processed += 1
        return event

    def unprocessed(self) -> List[Event]:
        return [entry[2] for entry in self._heap]


def rng_stream(seed: int, label: str) -> np.random.Generator:
    """Independent 64-bit Philox stream keyed by (seed, label).

    Keys are derived by hashing, so streams are stable per label: adding
    a connection to a scenario does not perturb the draws of the others.
    """
    digest = hashlib.sha256(f"{seed}:{label}".encode()).digest()
    key = np.frombuffer(digest[:16], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


# ---------------------------------------------------------------------------
# emission schedules


class PacedEmitter:
    """Constant spacing 1/rate, first cell at the start instant."""

    def __init__(self, rate: float):
        self.period = 1.0 / rate

    def first(self, start: float) -> float:
        return start

    def next(self, now: float) -> float:
        return now + self.period


class OnOffEmitter:
    """Exponential ON/OFF bursts, paced at the peak rate while ON.

    mean_off_s == 0 degenerates to always-on.  Draws come from the
    connection's own stream, so schedules are reproducible per seed.
    """

    def __init__(self, peak_rate: float, mean_on_s: float, mean_off_s: float, rng: np.random.Generator):
        self.period = 1.0 / peak_rate
        self.mean_on = mean_on_s
        self.mean_off = mean_off_s
        self.rng = rng
        self._on_end = 0.0

    def _draw_on(self) -> float:
        return float(self.rng.exponential(self.mean_on))

    def _draw_off(self) -> float:
        if self.mean_off == 0:
            return 0.0
        return float(self.rng.exponential(self.mean_off))

    def first(self, start: float) -> float:
        self._on_end = start + self._draw_on()
        return start

    def next(self, now: float) -> float:
        candidate = now + self.period
        while candidate >= self._on_end:
            start = self._on_end + self._draw_off()
            self._on_end = start + self._draw_on()
            candidate = start
        return candidate


class AbrEmitter:
    """Greedy source paced at the current allowed cell rate."""

    def __init__(self, source: AbrSourceState):
        self.source = source

    def first(self, start: float) -> float:
        return start

    def next(self, now: float) -> float:
        return now + 1.0 / self.source.acr


# ---------------------------------------------------------------------------
# flows


@dataclass
class TransitCell:
    """Envelope for a cell inside the simulator (not part of the wire image)."""

    cell: Cell
    flow: "FlowState"
    entry_time: float
    seq: int


class FlowState:
    """Cell conservation bookkeeping shared by every traffic class."""

    def __init__(self, flow_id: str):
        self.id = flow_id
        self.emitted = 0
        self.delivered = 0
        self.lost = 0
        self.loss_reasons: Dict[str, int] = {}
        self.next_seq = 0
        self.last_delivered_seq = -1

    def take_seq(self) -> int:
        seq = self.next_seq
        self.next_seq += 1
        return seq

    def on_lost(self, tc: TransitCell, reason: str, now: float) -> None:
        self.lost += 1
        self.loss_reasons[reason] = self.loss_reasons.get(reason, 0) + 1

    def check_fifo(self, tc: TransitCell) -> None:
        # Cells of one VC must come out in emission order (gaps = losses).
        if tc.seq <= self.last_delivered_seq:
            raise AssertionError(f"per-VC FIFO violated on {self.id}")
        self.last_delivered_seq = tc.seq


class ContractFlow(FlowState):
    """One scenario connection: metrics, generator state, ABR machinery."""

    def __init__(self, spec: ConnectionSpec):
        super().__init__(spec.id)
        self.spec = spec
        self.metrics = ConnectionMetrics()
        self.emitter: Any = None
        self.forward_vci = 0
        self.forward_kind = InterfaceKind.UNI
        self.src_port = 0
        self.abr_source: Optional[AbrSourceState] = None
        self.observer: Optional[EfciObserver] = None
        self.feedback: Optional[FeedbackFlow] = None
        self.backward_vci = 0
        self.backward_kind = InterfaceKind.UNI
        self.dst_port = 0
        self.acr_log: List[Tuple[float, float, bool]] = []

    def on_emitted(self, clp: int) -> None:
        self.emitted += 1
        if clp == 1:
            self.metrics.transmitted_clp1 += 1
        else:
            self.metrics.transmitted_clp0 += 1

    def on_lost(self, tc: TransitCell, reason: str, now: float) -> None:
        super().on_lost(tc, reason, now)
        if tc.cell.header.clp == 1:
            self.metrics.lost_clp1 += 1
        else:
            self.metrics.lost_clp0 += 1


class FeedbackFlow(FlowState):
    """Backward management cells of one ABR connection."""

    def __init__(self, conn: ContractFlow):
        super().__init__(f"{conn.id}:feedback")
        self.conn = conn


class LaneVcKind(enum.Enum):
    TO_LES = "to_les"
    FROM_LES = "from_les"
    TO_BUS = "to_bus"
    FROM_BUS = "from_bus"
    DATA_DIRECT = "data_direct"


class LaneVc(FlowState):
    """One unidirectional LAN-emulation VC carrying AAL5 frames."""

    def __init__(self, flow_id: str, kind: LaneVcKind):
        super().__init__(flow_id)
        self.kind = kind
        self.reassembler = Reassembler()
        self.on_frame: Callable[[bytes], None] = lambda frame: None
        self.frames_in = 0
        self.reassembly_errors = 0
        self.src_node = ""
        self.src_port = 0
        self.first_vci = 0
        self.first_kind = InterfaceKind.UNI


class LaneTrafficState:
    """One frame source feeding a LEC."""

    def __init__(self, spec: LaneTrafficSpec, rng: np.random.Generator):
        self.spec = spec
        self.rng = rng
        self.sent = 0

    def draw_size(self) -> int:
        lo, hi = self.spec.frame_bytes
        if lo == hi:
            return lo
        return int(self.rng.integers(lo, hi + 1))


# ---------------------------------------------------------------------------
# topology runtime


class DirectedLink:
    """One direction of a physical link, with its transmit stats."""

    def __init__(
        self,
        src: str,
        src_port: int,
        dst: str,
        dst_port: int,
        bit_rate: float,
        prop: float,
        kind: InterfaceKind,
        booking: LinkBooking,
    ):
        self.src = src
        self.src_port = src_port
        self.dst = dst
        self.dst_port = dst_port
        self.bit_rate = bit_rate
        self.prop = prop
        self.kind = kind
        self.booking = booking
        self.tx_time = CELL_BITS / bit_rate
        self.cells = 0
        self.busy_first_half = 0.0
        self.busy_second_half = 0.0
        self._next_vci = FIRST_VCI

    @property
    def name(self) -> str:
        return f"{self.src}->{self.dst}"

    def alloc_vci(self) -> int:
        vci = self._next_vci
        self._next_vci += 1
        return vci


class PortTx:
    """Transmitter for one outgoing link direction: queue + wire."""

    def __init__(self, queue: OutputQueue, link: DirectedLink):
        self.queue = queue
        self.link = link
        self.busy = False
        self.holding: Optional[TransitCell] = None


class NodeRuntime:
    def __init__(self, name: str, kind: str):
        self.name = name
        self.kind = kind
        self.ports: Dict[int, PortTx] = {}
        self.neighbor_port: Dict[str, int] = {}
        self.vc_table = VcTable()
        self.routed = 0
        self.unknown_vc = 0
        self.endpoints: Dict[Tuple[int, int, int], Callable[[TransitCell], None]] = {}
        # LAN-emulation roles, when this host has any
        self.lec: Optional[Lec] = None


class LaneRuntime:
    def __init__(self) -> None:
        self.les = Les()
        self.bus = Bus()
        self.lecs: Dict[str, Lec] = {}  # host name -> client
        self.host_by_atm: Dict[bytes, str] = {}
        self.host_by_mac: Dict[bytes, str] = {}
        self.to_les: Dict[str, LaneVc] = {}
        self.from_les: Dict[str, LaneVc] = {}
        self.to_bus: Dict[str, LaneVc] = {}
        self.from_bus: Dict[str, LaneVc] = {}
        self.direct_vcs: List[LaneVc] = []
        self.traffic: List[LaneTrafficState] = []
        # receivers identify frames by (source MAC, sequence), so every
        # traffic entry of one source must draw from the same counter
        self.next_seq: Dict[str, int] = {}
        self.control_decode_errors = 0


class _EnginePort(LecPort):
    """Fabric adapter handed to each LEC."""

    def __init__(self, engine: "Engine", host: str):
        self._engine = engine
        self._host = host

    def now(self) -> float:
        return self._engine.events.now

    def send_arp_request(self, message: bytes) -> None:
        lane = self._engine.lane
        assert lane is not None
        self._engine._send_frame(lane.to_les[self._host], message)

    def send_to_bus(self, frame: bytes) -> None:
        lane = self._engine.lane
        assert lane is not None
        self._engine._send_frame(lane.to_bus[self._host], frame)

    def send_on_vc(self, vc: Any, frame: bytes) -> None:
        self._engine._send_frame(vc, frame)

    def open_data_vc(self, dest_atm: bytes) -> Optional["LaneVc"]:
        return self._engine._open_data_vc(self._host, dest_atm)

    def schedule(self, delay: float, fn: Callable[[], None]) -> None:
        events = self._engine.events
        events.schedule(events.now + delay, EventKind.TIMER_EXPIRY, fn)


# A nominal descriptor for best-effort LAN-emulation VCs: admission books
# nothing for UBR, the peak value is never used for pacing.
_LANE_VC_DESCRIPTOR = TrafficDescriptor(pcr=1.0)


class Engine:
    """Builds a runnable network from a scenario and runs it once."""

    def __init__(self, sc: Scenario):
        violations = validate_scenario(sc)
        if violations:
            raise ScenarioInvalid(violations)
        self.sc = sc
        self.duration = sc.duration_s
        self.events = EventQueue()
        self.nodes: Dict[str, NodeRuntime] = {}
        self.directed: Dict[Tuple[str, int], DirectedLink] = {}
        self.links: List[DirectedLink] = []
        self.adjacency: Dict[str, List[str]] = {}
        self.flows: List[FlowState] = []
        self.connections: List[ContractFlow] = []
        self.lane: Optional[LaneRuntime] = None
        self._ran = False
        self._build_topology()
        admission_violations = self._build_connections()
        if admission_violations:
            raise ScenarioInvalid(admission_violations)
        lane_violations = self._build_lane()
        if lane_violations:
            raise ScenarioInvalid(lane_violations)

    # -- construction ------------------------------------------------------

    def _build_topology(self) -> None:
        node_spec = {}
        for spec in self.sc.nodes:
            self.nodes[spec.name] = NodeRuntime(spec.name, spec.kind)
            node_spec[spec.name] = spec
        for spec in self.sc.links:
            kind = (
                InterfaceKind.UNI
                if "host" in (node_spec[spec.a].kind, node_spec[spec.b].kind)
                else InterfaceKind.NNI
            )
            for src, dst in ((spec.a, spec.b), (spec.b, spec.a)):
                src_node = self.nodes[src]
                dst_node = self.nodes[dst]
                src_port = len(src_node.ports)
                dst_port = dst_node.neighbor_port.get(src, len(dst_node.ports))
                link = DirectedLink(
                    src,
                    src_port,
                    dst,
                    dst_port,
                    spec.bit_rate,
                    spec.propagation_delay,
                    kind,
                    LinkBooking(spec.bit_rate / CELL_BITS, spec.booking_factor),
                )
                ns = node_spec[src]
                queue = OutputQueue(
                    capacity=ns.queue_capacity if ns.queue_capacity is not None else 128,
                    clp_threshold=ns.clp_threshold,
                    efci_threshold=ns.efci_threshold,
                )
                src_node.ports[src_port] = PortTx(queue, link)
                src_node.neighbor_port[dst] = src_port
                self.directed[(src, src_port)] = link
                self.links.append(link)
            self.adjacency.setdefault(spec.a, []).append(spec.b)
            self.adjacency.setdefault(spec.b, []).append(spec.a)

    def _chain(self, route: Sequence[str]) -> List[DirectedLink]:
        chain = []
        for a, b in zip(route, route[1:]):
            port = self.nodes[a].neighbor_port[b]
            chain.append(self.directed[(a, port)])
        return chain

    def _install_path(
        self, chain: Sequence[DirectedLink], sink: Callable[[TransitCell], None]
    ) -> List[int]:
        """Allocate one VCI per hop, fill switch tables, bind the sink."""
        vcis = [link.alloc_vci() for link in chain]
        for i in range(len(chain) - 1):
            sw = self.nodes[chain[i].dst]
            sw.vc_table.install(
                chain[i].dst_port,
                0,
                vcis[i],
                VcRoute(chain[i + 1].src_port, 0, vcis[i + 1]),
            )
        last = chain[-1]
        self.nodes[last.dst].endpoints[(last.dst_port, 0, vcis[-1])] = sink
        return vcis

    def _build_connections(self) -> List[str]:
        violations: List[str] = []
        generators = {g.id: g for g in self.sc.generators}
        for spec in self.sc.connections:
            flow = ContractFlow(spec)
            chain = self._chain(spec.route)
            if not cac_admit([l.booking for l in chain], spec.category, spec.descriptor):
                violations.append(f"connection {spec.id}: rejected by admission control")
                continue
            vcis = self._install_path(chain, self._data_sink(flow))
            flow.forward_vci = vcis[0]
            flow.forward_kind = chain[0].kind
            flow.src_port = chain[0].src_port
            if spec.category is ServiceCategory.ABR:
                self._setup_abr(flow)
            flow.emitter = self._make_emitter(flow, generators[spec.generator])
            self.flows.append(flow)
            self.connections.append(flow)
            if flow.feedback is not None:
                self.flows.append(flow.feedback)
        return violations

    def _setup_abr(self, flow: ContractFlow) -> None:
        spec = flow.spec
        over = spec.abr
        kwargs: Dict[str, Any] = {}
        if over is not None:
            if over.air is not None:
                kwargs["air"] = over.air
            if over.rdf is not None:
                kwargs["rdf"] = over.rdf
            if over.initial_acr is not None:
                kwargs["initial_acr"] = over.initial_acr
        mcr = spec.descriptor.mcr if spec.descriptor.mcr is not None else 0.0
        flow.abr_source = default_source(spec.descriptor.pcr, mcr, **kwargs)
        nrm = over.nrm if over is not None and over.nrm is not None else DEFAULT_NRM
        flow.observer = EfciObserver(nrm=nrm)
        flow.feedback = FeedbackFlow(flow)
        back = self._chain(tuple(reversed(spec.route)))
        vcis = self._install_path(back, self._feedback_sink(flow))
        flow.backward_vci = vcis[0]
        flow.backward_kind = back[0].kind
        flow.dst_port = back[0].src_port

    def _make_emitter(self, flow: ContractFlow, gen: GeneratorSpec) -> Any:
        if gen.kind == "paced_cbr":
            return PacedEmitter(gen.rate)  # type: ignore[arg-type]
        if gen.kind == "greedy_ubr":
            return PacedEmitter(gen.cap)  # type: ignore[arg-type]
        if gen.kind == "on_off_vbr":
            rng = rng_stream(self.sc.seed, f"conn:{flow.id}")
            return OnOffEmitter(gen.peak_rate, gen.mean_on_s, gen.mean_off_s, rng)  # type: ignore[arg-type]
        assert gen.kind == "greedy_abr"
        assert flow.abr_source is not None
        return AbrEmitter(flow.abr_source)

    def _build_lane(self) -> List[str]:
        spec = self.sc.lane
        if spec is None:
            return []
        lane = LaneRuntime()
        self.lane = lane
        violations: List[str] = []
        for lec_spec in spec.lecs:
            host = lec_spec.host
            atm = atm_address(host)
            try:
                lane.les.register(lec_spec.mac, atm)
            except RegistrationConflict as exc:
                violations.append(f"lane lec {host}: {exc}")
                continue
            lec = Lec(
                mac=lec_spec.mac,
                atm=atm,
                port=_EnginePort(self, host),
                parallel_bus=spec.parallel_bus,
            )
            lane.lecs[host] = lec
            lane.host_by_atm[atm] = host
            lane.host_by_mac[lec_spec.mac] = host
            self.nodes[host].lec = lec

            to_les = self._lane_path(host, spec.les, LaneVcKind.TO_LES)
            to_les.on_frame = self._les_request_handler(host)
            lane.to_les[host] = to_les

            from_les = self._lane_path(spec.les, host, LaneVcKind.FROM_LES)
            from_les.on_frame = self._lec_reply_handler(lec)
            lane.from_les[host] = from_les

            to_bus = self._lane_path(host, spec.bus, LaneVcKind.TO_BUS)
            to_bus.on_frame = self._bus_ingress_handler(atm)
            lane.to_bus[host] = to_bus

            from_bus = self._lane_path(spec.bus, host, LaneVcKind.FROM_BUS)
            from_bus.on_frame = self._lec_deliver_handler(lec, via_bus=True)
            lane.from_bus[host] = from_bus

            lane.bus.attach(atm, self._bus_egress(from_bus))
        for i, traffic in enumerate(spec.traffic):
            rng = rng_stream(self.sc.seed, f"lane:{i}:{traffic.src}")
            lane.traffic.append(LaneTrafficState(traffic, rng))
        return violations

    def _lane_path(self, src: str, dst: str, kind: LaneVcKind) -> LaneVc:
        route = self._bfs_route(src, dst)
        chain = self._chain(route)
        vc = LaneVc(f"lane:{kind.value}:{src}->{dst}", kind)
        cac_admit([l.booking for l in chain], ServiceCategory.UBR, _LANE_VC_DESCRIPTOR)
        vcis = self._install_path(chain, self._lane_sink(vc))
        vc.src_node = src
        vc.src_port = chain[0].src_port
        vc.first_vci = vcis[0]
        vc.first_kind = chain[0].kind
        self.flows.append(vc)
        return vc

    def _bfs_route(self, src: str, dst: str) -> List[str]:
        if src == dst:
            raise ScenarioInvalid([f"no route needed from {src} to itself"])
        parent: Dict[str, str] = {src: src}
        frontier = [src]
        while frontier:
            nxt: List[str] = []
            for name in frontier:
                for neighbor in self.adjacency.get(name, ()):
                    if neighbor not in parent:
                        parent[neighbor] = name
                        nxt.append(neighbor)
            frontier = nxt
        if dst not in parent:
            raise ScenarioInvalid([f"no path between {src} and {dst}"])
        route = [dst]
        while route[-1] != src:
            route.append(parent[route[-1]])
        route.reverse()
        return route

    # -- per-flow sinks ------------------------------------------------------

    def _data_sink(self, flow: ContractFlow) -> Callable[[TransitCell], None]:
        def sink(tc: TransitCell) -> None:
            now = self.events.now
            flow.check_fifo(tc)
            flow.delivered += 1
            flow.metrics.delivered += 1
            flow.metrics.delay_samples.append(now - tc.entry_time)
            if flow.observer is not None:
                indication = flow.observer.observe(tc.cell.header.efci)
                if indication is not None:
                    self.events.schedule(
                        now,
                        EventKind.FEEDBACK_EPOCH,
                        lambda: self._send_feedback(flow, indication),
                    )

        return sink

    def _feedback_sink(self, flow: ContractFlow) -> Callable[[TransitCell], None]:
        def sink(tc: TransitCell) -> None:
            feedback = flow.feedback
            assert feedback is not None and flow.abr_source is not None
            feedback.check_fifo(tc)
            feedback.delivered += 1
            payload = tc.cell.payload
            indication = FeedbackIndication(
                congested=payload[0] == 1, epoch=int.from_bytes(payload[1:9], "big")
            )
            acr = source_adjust(flow.abr_source, indication)
            flow.acr_log.append((self.events.now, acr, indication.congested))

        return sink

    def _send_feedback(self, flow: ContractFlow, indication: FeedbackIndication) -> None:
        feedback = flow.feedback
        assert feedback is not None
        payload = (
            bytes((1 if indication.congested else 0,))
            + indication.epoch.to_bytes(8, "big")
            + bytes(39)
        )
        header = CellHeader(
            kind=flow.backward_kind,
            vpi=0,
            vci=flow.backward_vci,
            is_management=True,
        )
        now = self.events.now
        tc = TransitCell(Cell(header, payload), feedback, now, feedback.take_seq())
        feedback.emitted += 1
        dst_host = self.nodes[flow.spec.route[-1]]
        self._send(dst_host, flow.dst_port, tc)

    def _lane_sink(self, vc: LaneVc) -> Callable[[TransitCell], None]:
        def sink(tc: TransitCell) -> None:
            vc.check_fifo(tc)
            vc.delivered += 1
            result = vc.reassembler.push(tc.cell.payload, tc.cell.header.aal5_last)
            if result is None:
                return
            if isinstance(result, ReassemblyError):
                vc.reassembly_errors += 1
                return
            vc.frames_in += 1
            vc.on_frame(result)

        return sink

    def _les_request_handler(self, origin_host: str) -> Callable[[bytes], None]:
        def handle(message: bytes) -> None:
            lane = self.lane
            assert lane is not None
            try:
                op, body = decode_control(message)
            except ValueError:
                lane.control_decode_errors += 1
                return
            if op != OP_ARP_REQUEST:
                lane.control_decode_errors += 1
                return
            _requester_mac, target_mac = body
            atm = lane.les.resolve(target_mac)
            self._send_frame(lane.from_les[origin_host], encode_arp_reply(target_mac, atm))

        return handle

    def _lec_reply_handler(self, lec: Lec) -> Callable[[bytes], None]:
        def handle(message: bytes) -> None:
            lane = self.lane
            assert lane is not None
            try:
                op, body = decode_control(message)
            except ValueError:
                lane.control_decode_errors += 1
                return
            if op != OP_ARP_REPLY:
                lane.control_decode_errors += 1
                return
            mac, atm = body
            lec.on_arp_reply(mac, atm)

        return handle

    def _bus_ingress_handler(self, origin_atm: bytes) -> Callable[[bytes], None]:
        def handle(frame: bytes) -> None:
            lane = self.lane
            assert lane is not None
            lane.bus.forward(frame, origin_atm)

        return handle

    def _bus_egress(self, from_bus: LaneVc) -> Callable[[bytes], None]:
        def send(frame: bytes) -> None:
            self._send_frame(from_bus, frame)

        return send

    def _lec_deliver_handler(self, lec: Lec, via_bus: bool) -> Callable[[bytes], None]:
        def handle(frame: bytes) -> None:
            lec.deliver(frame, via_bus=via_bus)

        return handle

    def _open_data_vc(self, src_host: str, dest_atm: bytes) -> Optional[LaneVc]:
        lane = self.lane
        assert lane is not None
        dst_host = lane.host_by_atm.get(dest_atm)
        if dst_host is None:
            return None
        route = self._bfs_route(src_host, dst_host)
        chain = self._chain(route)
        if not cac_admit([l.booking for l in chain], ServiceCategory.UBR, _LANE_VC_DESCRIPTOR):
            return None
        vc = LaneVc(f"lane:data:{src_host}->{dst_host}", LaneVcKind.DATA_DIRECT)
        vc.on_frame = self._lec_deliver_handler(lane.lecs[dst_host], via_bus=False)
        vcis = self._install_path(chain, self._lane_sink(vc))
        vc.src_node = src_host
        vc.src_port = chain[0].src_port
        vc.first_vci = vcis[0]
        vc.first_kind = chain[0].kind
        self.flows.append(vc)
        lane.direct_vcs.append(vc)
        return vc

    # -- cell movement -------------------------------------------------------

    def _send(self, node: NodeRuntime, port: int, tc: TransitCell) -> None:
        tx = node.ports[port]
        outcome = tx.queue.enqueue(tc.cell, self.events.now, meta=tc)
        if outcome is EnqueueOutcome.ACCEPTED:
            self._try_start(tx)
        else:
            tc.flow.on_lost(tc, outcome.value, self.events.now)

    def _try_start(self, tx: PortTx) -> None:
        if tx.busy:
            return
        item = tx.queue.dequeue()
        if item is None:
            return
        cell, tc = item
        tc.cell = cell  # queue may have EFCI-marked it
        tx.busy = True
        tx.holding = tc
        link = tx.link
        start = self.events.now
        finish = start + link.tx_time
        link.cells += 1
        self._accrue_busy(link, start, finish)
        self.events.schedule(
            finish, EventKind.CELL_TRANSMIT_COMPLETE, lambda: self._complete(tx)
        )

    def _accrue_busy(self, link: DirectedLink, start: float, finish: float) -> None:
        half = self.duration / 2.0
        first = min(finish, half) - min(start, half)
        second = min(finish, self.duration) - max(min(start, self.duration), half)
        if first > 0:
            link.busy_first_half += first
        if second > 0:
            link.busy_second_half += second

    def _complete(self, tx: PortTx) -> None:
        tc = tx.holding
        assert tc is not None
        tx.holding = None
        tx.busy = False
        link = tx.link
        self.events.schedule(
            self.events.now + link.prop,
            EventKind.CELL_ARRIVAL,
            lambda: self._arrive(link, tc),
            payload=tc,
        )
        self._try_start(tx)

    def _arrive(self, link: DirectedLink, tc: TransitCell) -> None:
        node = self.nodes[link.dst]
        if node.kind == "switch":
            self._switch_cell(node, link.dst_port, tc)
        else:
            self._host_cell(node, link.dst_port, tc)

    def _switch_cell(self, node: NodeRuntime, in_port: int, tc: TransitCell) -> None:
        routed = route_cell(tc.cell, in_port, node.vc_table)
        if routed is None:
            node.unknown_vc += 1
            tc.flow.on_lost(tc, "unknown_vc", self.events.now)
            return
        cell, out_port = routed
        node.routed += 1
        out_link = node.ports[out_port].link
        if cell.header.kind is not out_link.kind:
            cell = Cell(replace(cell.header, kind=out_link.kind), cell.payload)
        tc.cell = cell
        self._send(node, out_port, tc)

    def _host_cell(self, node: NodeRuntime, port: int, tc: TransitCell) -> None:
        header = tc.cell.header
        sink = node.endpoints.get((port, header.vpi, header.vci))
        if sink is None:
            node.unknown_vc += 1
            tc.flow.on_lost(tc, "unknown_vc", self.events.now)
            return
        sink(tc)

    # -- traffic sources -------------------------------------------------------

    def _schedule_sources(self) -> None:
        for flow in self.connections:
            first = flow.emitter.first(0.0)
            if first <= self.duration:
                self.events.schedule(
                    first, EventKind.GENERATOR_FIRE, self._fire_handler(flow)
                )
        if self.lane is not None:
            for state in self.lane.traffic:
                if state.spec.start <= self.duration:
                    self.events.schedule(
                        state.spec.start,
                        EventKind.GENERATOR_FIRE,
                        self._lane_fire_handler(state),
                    )

    def _fire_handler(self, flow: ContractFlow) -> Callable[[], None]:
        def fire() -> None:
            now = self.events.now
            header = CellHeader(
                kind=flow.forward_kind,
                vpi=0,
                vci=flow.forward_vci,
                clp=flow.spec.clp,
            )
            tc = TransitCell(Cell(header), flow, now, flow.take_seq())
            flow.on_emitted(flow.spec.clp)
            self._send(self.nodes[flow.spec.route[0]], flow.src_port, tc)
            nxt = flow.emitter.next(now)
            if nxt <= self.duration:
                self.events.schedule(nxt, EventKind.GENERATOR_FIRE, fire)

        return fire

    def _lane_fire_handler(self, state: LaneTrafficState) -> Callable[[], None]:
        lane = self.lane
        assert lane is not None
        lec = lane.lecs[state.spec.src]
        period = 1.0 / state.spec.rate

        def fire() -> None:
            now = self.events.now
            size = state.draw_size()
            seq = lane.next_seq.get(state.spec.src, 0)
            lane.next_seq[state.spec.src] = seq + 1
            payload = seq.to_bytes(8, "big") + bytes(size - 8)
            state.sent += 1
            lec.send(state.spec.dst_mac, payload)
            if state.spec.count is not None and state.sent >= state.spec.count:
                return
            nxt = now + period
            if nxt <= self.duration:
                self.events.schedule(nxt, EventKind.GENERATOR_FIRE, fire)

        return fire

    def _send_frame(self, vc: LaneVc, frame: bytes) -> None:
        now = self.events.now
        node = self.nodes[vc.src_node]
        for payload, last in segment(frame):
            header = CellHeader(
                kind=vc.first_kind, vpi=0, vci=vc.first_vci, aal5_last=last
            )
            tc = TransitCell(Cell(header, payload), vc, now, vc.take_seq())
            vc.emitted += 1
            self._send(node, vc.src_port, tc)

    # -- run -------------------------------------------------------------------

    def run(self) -> "RunReport":
        if self._ran:
            raise RuntimeError("an Engine runs exactly once")
        self._ran = True
        self._schedule_sources()
        events = self.events
        last_key = (-math.inf, -1)
        while events._heap and events._heap[0][0] <= self.duration:
            event = events.pop()
            key = (event.time, event.seq)
            if key <= last_key:
                raise AssertionError("event dispatched out of order")
            last_key = key
            event.fn()
        self._audit()
        return self._report()

    def _audit(self) -> None:
        """Cell conservation: emitted == delivered + lost + in-network."""
        in_network: Dict[str, int] = {}

        def count(flow: FlowState) -> None:
            in_network[flow.id] = in_network.get(flow.id, 0) + 1

        for node in self.nodes.values():
            for tx in node.ports.values():
                if tx.holding is not None:
                    count(tx.holding.flow)
                for _cell, meta in tx.queue.pending():
                    count(meta.flow)
        for event in self.events.unprocessed():
            if event.kind is EventKind.CELL_ARRIVAL and event.payload is not None:
                count(event.payload.flow)
        for flow in self.flows:
            expected = flow.emitted - flow.delivered - flow.lost
            actual = in_network.get(flow.id, 0)
            if expected != actual:
                raise AssertionError(
                    f"conservation broken on {flow.id}: "
                    f"{flow.emitted} emitted, {flow.delivered} delivered, "
                    f"{flow.lost} lost, {actual} still in the network"
                )

    # -- reporting ---------------------------------------------------------------

    def _report(self) -> "RunReport":
        connections = {}
        abr_series = {}
        for flow in self.connections:
            stats = delay_stats(flow.metrics.delay_samples)
            entry: Dict[str, Any] = {
                "category": flow.spec.category.name,
                "transmitted": flow.metrics.transmitted,
                "transmitted_clp0": flow.metrics.transmitted_clp0,
                "transmitted_clp1": flow.metrics.transmitted_clp1,
                "delivered": flow.metrics.delivered,
                "lost": flow.metrics.lost,
                "lost_clp0": flow.metrics.lost_clp0,
                "lost_clp1": flow.metrics.lost_clp1,
                "in_flight": flow.metrics.in_flight,
                "loss_reasons": dict(sorted(flow.loss_reasons.items())),
                "clr": compute_clr(flow.metrics),
                "clr_clp0": compute_clr(flow.metrics, 0),
                "clr_clp1": compute_clr(flow.metrics, 1),
                "delay": None
                if stats is None
                else {
                    "count": stats.count,
                    "mean_ctd": stats.mean_ctd,
                    "max_ctd": stats.max_ctd,
                    "cdv_peak_to_peak": stats.cdv_peak_to_peak,
                    "cdv_stddev": stats.cdv_stddev,
                },
            }
            if flow.abr_source is not None:
                feedback = flow.feedback
                assert feedback is not None
                entry["abr"] = {
                    "final_acr": flow.abr_source.acr,
                    "mcr": flow.abr_source.mcr,
                    "pcr": flow.abr_source.pcr,
                    "adjustments": len(flow.acr_log),
                    "feedback_sent": feedback.emitted,
                    "feedback_delivered": feedback.delivered,
                    "feedback_lost": feedback.lost,
                }
                abr_series[flow.id] = list(flow.acr_log)
            connections[flow.id] = entry

        switches = {}
        for node in self.nodes.values():
            if node.kind != "switch":
                continue
            ports = {}
            for index, tx in sorted(node.ports.items()):
                queue = tx.queue
                ports[str(index)] = {
                    "toward": tx.link.dst,
                    "accepted": queue.accepted,
                    "full_drops": queue.full_drops,
                    "clp_drops": queue.clp_drops,
                    "efci_marks": queue.efci_marks,
                }
            switches[node.name] = {
                "routed": node.routed,
                "unknown_vc_drops": node.unknown_vc,
                "full_drops": sum(tx.queue.full_drops for tx in node.ports.values()),
                "clp_drops": sum(tx.queue.clp_drops for tx in node.ports.values()),
                "efci_marks": sum(tx.queue.efci_marks for tx in node.ports.values()),
                "ports": ports,
            }

        links = {}
        for link in self.links:
            busy = link.busy_first_half + link.busy_second_half
            links[link.name] = {
                "cells": link.cells,
                "busy_s": busy,
                "utilization": busy / self.duration,
                "second_half_utilization": link.busy_second_half / (self.duration / 2.0),
            }

        lane_report = None
        if self.lane is not None:
            lane_report = self._lane_report(self.lane)

        return RunReport(
            duration_s=self.duration,
            seed=self.sc.seed,
            events_processed=self.events.processed,
            connections=connections,
            switches=switches,
            links=links,
            abr_series=abr_series,
            lane=lane_report,
        )

    def _lane_report(self, lane: LaneRuntime) -> Dict[str, Any]:
        lecs = {}
        for host, lec in lane.lecs.items():
            counters = lec.counters
            lecs[host] = {
                "mac": format_mac(lec.mac),
                "frames_sent": counters.frames_sent,
                "broadcast_sent": counters.broadcast_sent,
                "arp_requests": counters.arp_requests,
                "arp_replies": counters.arp_replies,
                "received_direct": counters.received_direct,
                "received_bus": counters.received_bus,
                "received_broadcast": counters.received_broadcast,
                "filtered": counters.filtered,
                "duplicates": counters.duplicates,
                "pending_dropped": counters.pending_dropped,
                "per_destination": {
                    format_mac(mac): {
                        "sent_direct": stats.sent_direct,
                        "sent_bus": stats.sent_bus,
                        "queued": stats.queued,
                        "dropped_overflow": stats.dropped_overflow,
                        "dropped_timeout": stats.dropped_timeout,
                        "dropped_setup": stats.dropped_setup,
                    }
                    for mac, stats in lec.per_destination.items()
                },
            }
        vc_errors = sum(
            flow.reassembly_errors for flow in self.flows if isinstance(flow, LaneVc)
        )
        return {
            "les": {
                "registered": len(lane.les.directory),
                "arp_requests": lane.les.arp_requests,
                "arp_hits": lane.les.arp_hits,
                "arp_misses": lane.les.arp_misses,
            },
            "bus": {"frames_in": lane.bus.frames_in, "copies_out": lane.bus.copies_out},
            "data_direct_vcs": len(lane.direct_vcs),
            "reassembly_errors": vc_errors,
            "control_decode_errors": lane.control_decode_errors,
            "lecs": lecs,
        }


@dataclass
class RunReport:
    """Run results, serializable to a stable JSON document + CSV series."""

    duration_s: float
    seed: int
    events_processed: int
    connections: Dict[str, Dict[str, Any]]
    switches: Dict[str, Dict[str, Any]]
    links: Dict[str, Dict[str, Any]]
    abr_series: Dict[str, List[Tuple[float, float, bool]]]
    lane: Optional[Dict[str, Any]]

    def as_dict(self) -> Dict[str, Any]:
        return {
            "duration_s": self.duration_s,
            "seed": self.seed,
            "events_processed": self.events_processed,
            "connections": self.connections,
            "switches": self.switches,
            "links": self.links,
            "lane": self.lane,
        }

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), indent=2, sort_keys=True) + "\n"

    def abr_csv(self, conn_id: str) -> str:
        rows = ["time_s,acr,congested"]
        for time_s, acr, congested in self.abr_series[conn_id]:
            rows.append(f"{time_s!r},{acr!r},{1 if congested else 0}")
        return "\n".join(rows) + "\n"


def build(source: Any) -> Engine:
    """Engine from a Scenario, a dict, or a JSON file path."""
    sc = source if isinstance(source, Scenario) else load_scenario(source)
    return Engine(sc)


def run(source: Any) -> RunReport:
    return build(source).run()


def preflight(source: Any) -> List[str]:
    """Every validation and admission problem, without running anything."""
    try:
        build(source)
    except ScenarioInvalid as exc:
        return exc.violations
    return []
