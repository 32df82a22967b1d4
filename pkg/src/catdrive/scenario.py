"""Scenario data model, JSON format, validation and history/future slicing.

Vehicle state sequences are stored as ``(T, 5)`` float arrays with columns
``x, y, heading, speed, valid``; the ``VehicleState`` dataclass is the
single-state view of one row.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from types import MappingProxyType
from typing import Any, Mapping

import jsonschema
import numpy as np

from .geometry import Polyline, Pose2, concat_polylines, wrap_angles

X, Y, HEADING, SPEED, VALID = range(5)
STATE_KEYS = ("x", "y", "heading", "speed", "valid")

DEFAULT_DT = 0.1
DEFAULT_HORIZON = 91
DEFAULT_HISTORY = 11
SPLICE_TOLERANCE = 0.5
LANE_WIDTH_RANGE = (2.5, 6.0)


class ScenarioError(ValueError):
    """Base class for scenario loading and validation failures."""


class ScenarioParseError(ScenarioError):
    """The file is not valid JSON."""


class ScenarioSchemaError(ScenarioError):
    """The document does not follow the scenario schema."""

    def __init__(self, message: str, path: str = ""):
        super().__init__(f"{path or '<root>'}: {message}")
        self.path = path


class ScenarioInvariantError(ScenarioError):
    """The document parses but violates a semantic invariant."""

    def __init__(self, message: str, fields: tuple[str, ...] = ()):
        super().__init__(message)
        self.fields = fields


class SpliceError(ScenarioError):
    """An adversary override does not fit the logged history."""


_POINT = {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2}
_STATE = {
    "type": "object",
    "required": list(STATE_KEYS),
    "properties": {
        "x": {"type": "number"},
        "y": {"type": "number"},
        "heading": {"type": "number"},
        "speed": {"type": "number", "minimum": 0},
        "valid": {"type": "boolean"},
    },
}
SCENARIO_SCHEMA = {
    "type": "object",
    "required": [
        "dt", "horizon_steps", "history_steps", "map", "tracks",
        "ego_id", "adversary_id", "ego_route", "destination",
    ],
    "properties": {
        "dt": {"type": "number"},
        "horizon_steps": {"type": "integer"},
        "history_steps": {"type": "integer"},
        "map": {
            "type": "object",
            "required": ["lanes"],
            "properties": {
                "lanes": {
                    "type": "array",
                    "items": {
                        "type": "object",
                        "required": ["id", "lane_width", "successors", "centerline"],
                        "properties": {
                            "id": {"type": "string"},
                            "lane_width": {"type": "number"},
                            "successors": {"type": "array", "items": {"type": "string"}},
                            "centerline": {"type": "array", "items": _POINT, "minItems": 2},
                        },
                    },
                },
                "boundaries": {
                    "type": "array",
                    "items": {"type": "array", "items": _POINT, "minItems": 2},
                },
            },
        },
        "tracks": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["id", "length", "width", "states"],
                "properties": {
                    "id": {"type": "string"},
                    "length": {"type": "number"},
                    "width": {"type": "number"},
                    "states": {"type": "array", "items": _STATE},
                },
            },
        },
        "ego_id": {"type": "string"},
        "adversary_id": {"type": "string"},
        "ego_route": {"type": "array", "items": {"type": "string"}, "minItems": 1},
        "destination": _POINT,
    },
}


def _readonly(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, dtype=float)
    arr.setflags(write=False)
    return arr


def _extras(doc: Mapping, known) -> Mapping[str, Any]:
    return MappingProxyType({k: v for k, v in doc.items() if k not in known})


@dataclass(frozen=True)
class VehicleState:
    pose: Pose2
    speed: float
    valid: bool = True

    @classmethod
    def from_row(cls, row) -> "VehicleState":
        return cls(Pose2(row[X], row[Y], row[HEADING]), float(row[SPEED]), bool(row[VALID] > 0.5))

    def to_row(self) -> list[float]:
        return [self.pose.x, self.pose.y, self.pose.heading, self.speed, 1.0 if self.valid else 0.0]


def states_array(states) -> np.ndarray:
    """Coerce a sequence of ``VehicleState`` or rows into a ``(K, 5)`` array."""
    if isinstance(states, np.ndarray):
        arr = np.array(states, dtype=float)
        if arr.ndim == 2 and arr.shape[1] == 4:
            arr = np.hstack([arr, np.ones((len(arr), 1))])
    else:
        arr = np.array(
            [s.to_row() if isinstance(s, VehicleState) else list(s) for s in states], dtype=float
        )
        if arr.size == 0:
            arr = arr.reshape(0, 5)
    if arr.ndim != 2 or arr.shape[1] != 5:
        raise ValueError("states must have columns x, y, heading, speed, valid")
    return arr


@dataclass(frozen=True, eq=False)
class Track:
    id: str
    length: float
    width: float
    states: np.ndarray
    extras: Mapping[str, Any] = field(default_factory=dict)
    state_extras: tuple | None = None

    def __post_init__(self):
        object.__setattr__(self, "states", _readonly(self.states))

    @property
    def dims(self) -> tuple[float, float]:
        return (self.length, self.width)

    def state(self, step: int) -> VehicleState:
        return VehicleState.from_row(self.states[step])


@dataclass(frozen=True, eq=False)
class LaneSegment:
    id: str
    centerline: Polyline
    lane_width: float
    successors: tuple[str, ...] = ()
    extras: Mapping[str, Any] = field(default_factory=dict)


@dataclass(frozen=True, eq=False)
class TrafficMap:
    lanes: tuple[LaneSegment, ...]
    boundaries: tuple[Polyline, ...] = ()
    extras: Mapping[str, Any] = field(default_factory=dict)

    @cached_property
    def lane_index(self) -> dict[str, LaneSegment]:
        return {lane.id: lane for lane in self.lanes}

    def lane(self, lane_id: str) -> LaneSegment:
        return self.lane_index[lane_id]

    def predecessors(self, lane_id: str) -> list[str]:
        return [lane.id for lane in self.lanes if lane_id in lane.successors]


@dataclass(frozen=True, eq=False)
class Scenario:
    map: TrafficMap
    tracks: tuple[Track, ...]
    ego_id: str
    adversary_id: str
    ego_route: tuple[str, ...]
    destination: tuple[float, float]
    dt: float = DEFAULT_DT
    horizon_steps: int = DEFAULT_HORIZON
    history_steps: int = DEFAULT_HISTORY
    extras: Mapping[str, Any] = field(default_factory=dict)

    @cached_property
    def track_index(self) -> dict[str, Track]:
        return {t.id: t for t in self.tracks}

    def track(self, track_id: str) -> Track:
        return self.track_index[track_id]

    @property
    def ego(self) -> Track:
        return self.track(self.ego_id)

    @property
    def adversary(self) -> Track:
        return self.track(self.adversary_id)

    @property
    def future_steps(self) -> int:
        return self.horizon_steps - self.history_steps

    @property
    def cutoff(self) -> int:
        """Index of the last history frame."""
        return self.history_steps - 1

    @cached_property
    def route_polyline(self) -> Polyline:
        return concat_polylines(self.map.lane(lid).centerline for lid in self.ego_route)

    def logged_future(self, track_id: str) -> np.ndarray:
        return self.track(track_id).states[self.history_steps:]


@dataclass(frozen=True, eq=False)
class HistoryView:
    """Read-only cut of a scenario at the history boundary."""

    map: TrafficMap
    tracks: Mapping[str, np.ndarray]
    dims: Mapping[str, tuple[float, float]]
    dt: float
    history_steps: int
    horizon_steps: int

    @property
    def future_steps(self) -> int:
        return self.horizon_steps - self.history_steps


@dataclass(frozen=True, eq=False)
class AdversarialScenario:
    base: Scenario
    adversary_override: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "adversary_override", _readonly(self.adversary_override))

    @cached_property
    def adversary_states(self) -> np.ndarray:
        hist = self.base.adversary.states[: self.base.history_steps]
        return _readonly(np.concatenate([hist, self.adversary_override]))

    def track_states(self, track_id: str) -> np.ndarray:
        if track_id == self.base.adversary_id:
            return self.adversary_states
        return self.base.track(track_id).states


def _json_path(err: jsonschema.ValidationError) -> str:
    parts = []
    for p in err.absolute_path:
        parts.append(f"[{p}]" if isinstance(p, int) else (f".{p}" if parts else str(p)))
    return "".join(parts)


def scenario_from_dict(doc: Mapping) -> Scenario:
    """Validate a parsed JSON document and build a ``Scenario``."""
    try:
        jsonschema.validate(doc, SCENARIO_SCHEMA)
    except jsonschema.ValidationError as err:
        raise ScenarioSchemaError(err.message, _json_path(err)) from None

    dt = float(doc["dt"])
    horizon = int(doc["horizon_steps"])
    history = int(doc["history_steps"])
    if not dt > 0:
        raise ScenarioInvariantError(f"dt must be positive, got {dt}", ("dt",))
    if not 1 <= history < horizon:
        raise ScenarioInvariantError(
            f"history_steps ({history}) must be in [1, horizon_steps={horizon})",
            ("history_steps", "horizon_steps"),
        )

    lanes = []
    for i, ld in enumerate(doc["map"]["lanes"]):
        try:
            line = Polyline(ld["centerline"])
        except ValueError as exc:
            raise ScenarioInvariantError(f"map.lanes[{i}].centerline: {exc}", ("centerline",))
        width = float(ld["lane_width"])
        if not LANE_WIDTH_RANGE[0] <= width <= LANE_WIDTH_RANGE[1]:
            raise ScenarioInvariantError(
                f"map.lanes[{i}].lane_width {width} outside {LANE_WIDTH_RANGE}", ("lane_width",)
            )
        lanes.append(
            LaneSegment(
                ld["id"], line, width, tuple(ld["successors"]),
                _extras(ld, ("id", "lane_width", "successors", "centerline")),
            )
        )
    if not lanes:
        raise ScenarioInvariantError("map must contain at least one lane", ("map.lanes",))
    ids = [lane.id for lane in lanes]
    if len(set(ids)) != len(ids):
        raise ScenarioInvariantError("lane ids must be unique", ("map.lanes",))
    for lane in lanes:
        missing = [s for s in lane.successors if s not in ids]
        if missing:
            raise ScenarioInvariantError(
                f"lane {lane.id!r} has unknown successors {missing}", ("successors",)
            )
    boundaries = []
    for i, bd in enumerate(doc["map"].get("boundaries", [])):
        try:
            boundaries.append(Polyline(bd))
        except ValueError as exc:
            raise ScenarioInvariantError(f"map.boundaries[{i}]: {exc}", ("boundaries",))
    tmap = TrafficMap(tuple(lanes), tuple(boundaries), _extras(doc["map"], ("lanes", "boundaries")))

    tracks = []
    for i, td in enumerate(doc["tracks"]):
        states = td["states"]
        if len(states) != horizon:
            raise ScenarioInvariantError(
                f"tracks[{i}] ({td['id']!r}) has {len(states)} states, expected {horizon}",
                ("states", "horizon_steps"),
            )
        length, width = float(td["length"]), float(td["width"])
        if not (length > 0 and width > 0):
            raise ScenarioInvariantError(
                f"tracks[{i}] ({td['id']!r}) needs positive length and width", ("length", "width")
            )
        arr = np.array(
            [[s["x"], s["y"], s["heading"], s["speed"], 1.0 if s["valid"] else 0.0] for s in states],
            dtype=float,
        )
        arr[:, HEADING] = wrap_angles(arr[:, HEADING])
        extra_states = tuple(_extras(s, STATE_KEYS) for s in states)
        tracks.append(
            Track(
                td["id"], length, width, arr,
                _extras(td, ("id", "length", "width", "states")),
                extra_states if any(extra_states) else None,
            )
        )
    track_ids = [t.id for t in tracks]
    if len(set(track_ids)) != len(track_ids):
        raise ScenarioInvariantError("track ids must be unique", ("tracks",))

    ego_id, adv_id = doc["ego_id"], doc["adversary_id"]
    if ego_id == adv_id:
        raise ScenarioInvariantError(
            f"ego_id and adversary_id must differ (both {ego_id!r})", ("ego_id", "adversary_id")
        )
    for key, tid in (("ego_id", ego_id), ("adversary_id", adv_id)):
        if tid not in track_ids:
            raise ScenarioInvariantError(f"{key} {tid!r} does not name a track", (key,))
    for lid in doc["ego_route"]:
        if lid not in ids:
            raise ScenarioInvariantError(f"ego_route names unknown lane {lid!r}", ("ego_route",))

    known = set(SCENARIO_SCHEMA["required"])
    return Scenario(
        map=tmap,
        tracks=tuple(tracks),
        ego_id=ego_id,
        adversary_id=adv_id,
        ego_route=tuple(doc["ego_route"]),
        destination=(float(doc["destination"][0]), float(doc["destination"][1])),
        dt=dt,
        horizon_steps=horizon,
        history_steps=history,
        extras=_extras(doc, known),
    )


def _states_to_json(arr: np.ndarray, extras=None) -> list[dict]:
    out = []
    for i, row in enumerate(arr):
        d = {
            "x": float(row[X]),
            "y": float(row[Y]),
            "heading": float(row[HEADING]),
            "speed": float(row[SPEED]),
            "valid": bool(row[VALID] > 0.5),
        }
        if extras is not None and extras[i]:
            d.update(extras[i])
        out.append(d)
    return out


def scenario_to_dict(s: Scenario) -> dict:
    lanes = []
    for lane in s.map.lanes:
        d = {
            "id": lane.id,
            "lane_width": lane.lane_width,
            "successors": list(lane.successors),
            "centerline": lane.centerline.points.tolist(),
        }
        d.update(lane.extras)
        lanes.append(d)
    tmap = {"lanes": lanes, "boundaries": [b.points.tolist() for b in s.map.boundaries]}
    tmap.update(s.map.extras)
    tracks = []
    for t in s.tracks:
        d = {
            "id": t.id,
            "length": t.length,
            "width": t.width,
            "states": _states_to_json(t.states, t.state_extras),
        }
        d.update(t.extras)
        tracks.append(d)
    doc = {
        "dt": s.dt,
        "horizon_steps": s.horizon_steps,
        "history_steps": s.history_steps,
        "map": tmap,
        "tracks": tracks,
        "ego_id": s.ego_id,
        "adversary_id": s.adversary_id,
        "ego_route": list(s.ego_route),
        "destination": list(s.destination),
    }
    doc.update(s.extras)
    return doc


def dumps_canonical(doc) -> str:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def load_scenario(path) -> Scenario:
    """Read and validate one scenario file."""
    text = Path(path).read_text(encoding="utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioParseError(f"{path}: {exc}") from None
    return scenario_from_dict(doc)


def save_scenario(s: Scenario, path) -> None:
    Path(path).write_text(dumps_canonical(scenario_to_dict(s)), encoding="utf-8")


def slice_history(s: Scenario) -> HistoryView:
    """Expose the map and the first ``history_steps`` states of every track."""
    tracks = {}
    for t in s.tracks:
        view = t.states[: s.history_steps].view()
        view.setflags(write=False)
        tracks[t.id] = view
    return HistoryView(
        map=s.map,
        tracks=MappingProxyType(tracks),
        dims=MappingProxyType({t.id: t.dims for t in s.tracks}),
        dt=s.dt,
        history_steps=s.history_steps,
        horizon_steps=s.horizon_steps,
    )


def splice_gap(last_history: np.ndarray, first_future: np.ndarray, dt: float) -> float:
    """Distance between a future's first position and the one-step extrapolation of history.

    The extrapolation advances the last logged pose along its heading at its
    logged speed, so a vehicle continuing smoothly has a gap near zero.
    """
    px = last_history[X] + last_history[SPEED] * dt * math.cos(last_history[HEADING])
    py = last_history[Y] + last_history[SPEED] * dt * math.sin(last_history[HEADING])
    return math.hypot(first_future[X] - px, first_future[Y] - py)


def apply_adversary(s: Scenario, future, tolerance: float = SPLICE_TOLERANCE) -> AdversarialScenario:
    """Replace the adversary's future with ``future`` after checking length and continuity."""
    arr = states_array(future)
    if len(arr) != s.future_steps:
        raise SpliceError(
            f"override has {len(arr)} states, expected {s.future_steps} "
            f"(horizon {s.horizon_steps} - history {s.history_steps})"
        )
    last = s.adversary.states[s.cutoff]
    gap = splice_gap(last, arr[0], s.dt)
    if gap > tolerance:
        raise SpliceError(f"override starts {gap:.3f} m from the logged history (limit {tolerance} m)")
    arr[:, HEADING] = wrap_angles(arr[:, HEADING])
    return AdversarialScenario(s, arr)


def identity_adversary(s: Scenario) -> AdversarialScenario:
    """The raw scenario expressed as an adversarial one (logged future kept)."""
    return AdversarialScenario(s, s.logged_future(s.adversary_id))


def adversarial_to_dict(adv: AdversarialScenario) -> dict:
    return {
        "scenario": scenario_to_dict(adv.base),
        "adversary_override": _states_to_json(adv.adversary_override),
    }


def adversarial_from_dict(doc: Mapping) -> AdversarialScenario:
    base = scenario_from_dict(doc["scenario"])
    return apply_adversary(base, [[st[k] for k in STATE_KEYS] for st in doc["adversary_override"]])


def load_adversarial_or_raw(path) -> AdversarialScenario:
    """Load either a generated adversarial scenario file or a raw scenario file."""
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if "adversary_override" in doc:
        return adversarial_from_dict(doc)
    return identity_adversary(scenario_from_dict(doc))
