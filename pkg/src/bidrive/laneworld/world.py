"""World state, scenario spawning, tick dynamics, and driving events.

The ego vehicle follows a kinematic bicycle model at a fixed 10 Hz step.
Background vehicles track lane centerlines with a simple car-following and
red-light rule stack; pedestrians patrol sidewalk segments. Every rule
violation or terminal condition is emitted as a timestamped DrivingEvent.
Evolution is a pure function of (scenario config, seed, ego action trace).
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .layout import Layout, Route, builtin_layout, route_from_id

TICK_RATE = 10               # Hz
DT = 1.0 / TICK_RATE

MAX_STEER_RAD = 0.6
MAX_THROTTLE_ACCEL = 4.0     # m/s^2
MAX_BRAKE_ACCEL = 6.0        # m/s^2
MAX_SPEED = 9.0              # m/s
WHEELBASE = 2.5              # m

NPC_CRUISE = 5.0             # m/s
PED_SPEED = 1.2              # m/s

GREEN_TICKS = 80             # 8 s per light phase

LANE_HALF_WIDTH = 2.0
OFF_LANE_LATERAL = 2.5       # m off the route centerline
DEVIATION_LATERAL = 7.0      # m: wrong lane / wrong road
LAYOUT_CLEARANCE = 4.5       # m from any lane centerline = hit the layout
INTERSECTION_FREE_RADIUS = 10.0

VEHICLE_RADIUS = 1.3
PED_RADIUS = 0.4

BLOCKED_SPEED = 0.1          # m/s
BLOCKED_TICKS = 300          # 30 s below BLOCKED_SPEED

APPROACH_WINDOW = 18.0       # m before a stop line where turn commands start
COMPLETE_MARGIN = 2.0        # m of route tail counted as complete

EVENT_COOLDOWN = 20          # ticks between repeats of the same event kind

# NoCrash-style density levels: (pedestrians, vehicles) before desk scaling.
DENSITY_ACTORS = {"none": (0, 0), "normal": (50, 15), "crowded": (70, 70)}

WEATHER_TRAIN = ("clear", "sunset")
WEATHER_HELDOUT = ("rain", "wet_sunset")
WEATHER_TAGS = WEATHER_TRAIN + WEATHER_HELDOUT


class ScenarioError(ValueError):
    pass


class EventKind(enum.Enum):
    RED_LIGHT_VIOLATION = "RED_LIGHT_VIOLATION"
    COLLISION_VEHICLE = "COLLISION_VEHICLE"
    COLLISION_PEDESTRIAN = "COLLISION_PEDESTRIAN"
    COLLISION_LAYOUT = "COLLISION_LAYOUT"
    COLLISION_OTHER = "COLLISION_OTHER"
    ROUTE_DEVIATION = "ROUTE_DEVIATION"
    OFF_LANE = "OFF_LANE"
    AGENT_BLOCKED = "AGENT_BLOCKED"
    ROUTE_COMPLETE = "ROUTE_COMPLETE"
    TIMEOUT = "TIMEOUT"


TERMINAL_KINDS = {
    EventKind.COLLISION_VEHICLE,
    EventKind.COLLISION_PEDESTRIAN,
    EventKind.COLLISION_LAYOUT,
    EventKind.COLLISION_OTHER,
    EventKind.ROUTE_COMPLETE,
    EventKind.TIMEOUT,
}

INFRACTION_KINDS = {
    EventKind.RED_LIGHT_VIOLATION,
    EventKind.COLLISION_VEHICLE,
    EventKind.COLLISION_PEDESTRIAN,
    EventKind.COLLISION_LAYOUT,
    EventKind.COLLISION_OTHER,
    EventKind.ROUTE_DEVIATION,
    EventKind.OFF_LANE,
    EventKind.AGENT_BLOCKED,
}


@dataclass(frozen=True)
class DrivingEvent:
    tick: int
    kind: EventKind
    payload: dict = field(default_factory=dict)


@dataclass(frozen=True)
class ScenarioConfig:
    layout_id: str = "town_a"
    density: str = "none"
    weather: str = "clear"
    route_id: int = 0
    route_segments: int = 4
    density_scale: float = 0.2     # desk-scale reduction of actor counts
    frame_size: int = 96
    # Scripted test hooks: place a stationary actor on the route at a given
    # arclength (meters from the start).
    pedestrian_on_route: float | None = None
    stopped_lead_on_route: float | None = None

    def __post_init__(self):
        if self.density not in DENSITY_ACTORS:
            raise ScenarioError(
                f"unknown density {self.density!r}; expected {sorted(DENSITY_ACTORS)}"
            )
        if self.weather not in WEATHER_TAGS:
            raise ScenarioError(
                f"unknown weather {self.weather!r}; expected {sorted(WEATHER_TAGS)}"
            )

    def actor_counts(self) -> tuple[int, int]:
        peds, vehicles = DENSITY_ACTORS[self.density]
        return round(peds * self.density_scale), round(vehicles * self.density_scale)


@dataclass
class EgoState:
    x: float
    y: float
    heading: float
    speed: float = 0.0

    @property
    def pos(self) -> np.ndarray:
        return np.array([self.x, self.y])


@dataclass
class NPCVehicle:
    waypoints: np.ndarray     # (N, 2) current path
    arclength: np.ndarray
    s: float
    speed: float
    last_node: str            # node the current lane leads to
    prev_node: str
    stationary: bool = False

    @property
    def pos(self) -> np.ndarray:
        return _point_on(self.waypoints, self.arclength, self.s)

    @property
    def heading(self) -> float:
        a = _point_on(self.waypoints, self.arclength, self.s)
        b = _point_on(self.waypoints, self.arclength, min(self.s + 1.0, self.arclength[-1]))
        if np.allclose(a, b):
            b = a + np.array([1.0, 0.0])
        return math.atan2(b[1] - a[1], b[0] - a[0])


@dataclass
class Pedestrian:
    anchor_a: np.ndarray
    anchor_b: np.ndarray
    t: float                 # position parameter in [0, 1]
    direction: int           # +1 / -1
    stationary: bool = False

    @property
    def pos(self) -> np.ndarray:
        return self.anchor_a * (1 - self.t) + self.anchor_b * self.t


def _point_on(points: np.ndarray, arclength: np.ndarray, s: float) -> np.ndarray:
    idx = int(np.searchsorted(arclength, s, side="right")) - 1
    idx = max(0, min(idx, len(points) - 2))
    s0, s1 = arclength[idx], arclength[idx + 1]
    t = 0.0 if s1 <= s0 else min(max((s - s0) / (s1 - s0), 0.0), 1.0)
    return points[idx] * (1 - t) + points[idx + 1] * t


def light_is_green(axis: str, tick: int) -> bool:
    """Global two-phase cycle: even phases give north-south green."""
    ns_green = (tick // GREEN_TICKS) % 2 == 0
    return ns_green if axis == "ns" else not ns_green


class World:
    """Mutable simulation state for one episode."""

    def __init__(self, cfg: ScenarioConfig, seed: int):
        self.cfg = cfg
        self.seed = int(seed)
        self.rng = np.random.default_rng(self.seed)
        self.layout: Layout = builtin_layout(cfg.layout_id)
        self.route: Route = route_from_id(self.layout, cfg.route_id, cfg.route_segments)
        pos, heading = self.route.start_pose
        self.ego = EgoState(float(pos[0]), float(pos[1]), heading)
        self.tick = 0
        self.done = False
        self.eval_mode = False
        self.distance_completed = 0.0
        self._progress_idx = 0
        self._blocked_ticks = 0
        self._crossed_stop_lines: set[str] = set()
        self._last_event_tick: dict[EventKind, int] = {}
        self._deviating = False
        self.max_ticks = int(self.route.total_length / 2.5 * TICK_RATE) + 600
        self._all_lane_points = np.vstack(
            [lane.points for lane in self.layout.lanes.values()]
        )
        self._node_points = np.array(
            [n.pos for n in self.layout.nodes.values()]
        )
        self.vehicles: list[NPCVehicle] = []
        self.pedestrians: list[Pedestrian] = []
        self._spawn_actors()
        self._spawn_scripted()

    # -- spawning -----------------------------------------------------------

    def _lane_path(self, start: str, end: str) -> tuple[np.ndarray, np.ndarray]:
        lane = self.layout.lane(start, end)
        pts = lane.points
        seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
        return pts, np.concatenate([[0.0], np.cumsum(seg)])

    def _spawn_actors(self) -> None:
        n_peds, n_vehicles = self.cfg.actor_counts()
        lane_keys = sorted(self.layout.lanes)
        occupied = [self.ego.pos]

        def clear_of(pos: np.ndarray, margin: float) -> bool:
            return all(np.linalg.norm(pos - p) >= margin for p in occupied)

        for _ in range(n_vehicles):
            placed = False
            for _attempt in range(200):
                key = lane_keys[int(self.rng.integers(len(lane_keys)))]
                pts, arc = self._lane_path(*key)
                s = float(self.rng.uniform(5.0, arc[-1] - 5.0))
                pos = _point_on(pts, arc, s)
                if clear_of(pos, 10.0):
                    self.vehicles.append(
                        NPCVehicle(pts, arc, s, NPC_CRUISE, key[1], key[0])
                    )
                    occupied.append(pos)
                    placed = True
                    break
            if not placed:
                raise ScenarioError(
                    f"could not place {n_vehicles} vehicles on layout "
                    f"{self.cfg.layout_id!r}; density infeasible"
                )
        for _ in range(n_peds):
            placed = False
            for _attempt in range(200):
                key = lane_keys[int(self.rng.integers(len(lane_keys)))]
                lane = self.layout.lane(*key)
                r = np.array([lane.direction[1], -lane.direction[0]])
                s0 = float(self.rng.uniform(0.0, max(lane.length - 12.0, 1.0)))
                a = _point_on(lane.points, np.linspace(0, lane.length, len(lane.points)), s0)
                a = a + r * 4.5
                b = a + lane.direction * min(12.0, lane.length - s0)
                if clear_of(a, 4.0):
                    self.pedestrians.append(
                        Pedestrian(a, b, float(self.rng.uniform(0, 1)), 1)
                    )
                    occupied.append(a)
                    placed = True
                    break
            if not placed:
                raise ScenarioError(
                    f"could not place {n_peds} pedestrians on layout "
                    f"{self.cfg.layout_id!r}; density infeasible"
                )

    def _spawn_scripted(self) -> None:
        if self.cfg.pedestrian_on_route is not None:
            p = self.route.point_at(self.cfg.pedestrian_on_route)
            self.pedestrians.append(Pedestrian(p, p.copy(), 0.0, 1, stationary=True))
        if self.cfg.stopped_lead_on_route is not None:
            s = self.cfg.stopped_lead_on_route
            pts = self.route.waypoints
            arc = self.route.arclength
            veh = NPCVehicle(pts, arc, float(s), 0.0, "-", "-", stationary=True)
            self.vehicles.append(veh)

    # -- geometry helpers ----------------------------------------------------

    def route_lateral_distance(self) -> float:
        i = self._progress_idx
        lo = max(0, i - 5)
        hi = min(len(self.route.waypoints), i + 6)
        d = np.linalg.norm(self.route.waypoints[lo:hi] - self.ego.pos, axis=1)
        return float(d.min())

    def nearest_lane_distance(self, pos: np.ndarray) -> float:
        d = np.linalg.norm(self._all_lane_points - pos, axis=1)
        return float(d.min())

    def nearest_node_distance(self, pos: np.ndarray) -> float:
        d = np.linalg.norm(self._node_points - pos, axis=1)
        return float(d.min())

    def _update_progress(self) -> None:
        wp = self.route.waypoints
        i = self._progress_idx
        hi = min(len(wp), i + 60)
        d = np.linalg.norm(wp[i:hi] - self.ego.pos, axis=1)
        self._progress_idx = i + int(np.argmin(d))
        self.distance_completed = float(self.route.arclength[self._progress_idx])

    # -- events ---------------------------------------------------------------

    def _emit(self, events: list, kind: EventKind, **payload) -> None:
        last = self._last_event_tick.get(kind)
        if last is not None and self.tick - last < EVENT_COOLDOWN:
            return
        self._last_event_tick[kind] = self.tick
        events.append(DrivingEvent(self.tick, kind, payload))


def spawn_scenario(cfg: ScenarioConfig, seed: int) -> World:
    """Build a deterministic world for (cfg, seed)."""
    return World(cfg, seed)


def step(world: World, ego_action) -> list[DrivingEvent]:
    """Advance the world one tick under the ego action; returns new events."""
    if world.done:
        return []
    steer = float(min(max(ego_action[0] if not hasattr(ego_action, "steer") else ego_action.steer, -1.0), 1.0))
    accel = float(min(max(ego_action[1] if not hasattr(ego_action, "accel") else ego_action.accel, -1.0), 1.0))

    prev_s = world.distance_completed
    ego = world.ego

    # Kinematic bicycle update; accel < 0 applies the (stronger) braking force.
    delta = steer * MAX_STEER_RAD
    a = accel * (MAX_THROTTLE_ACCEL if accel >= 0 else MAX_BRAKE_ACCEL)
    ego.speed = min(max(ego.speed + a * DT, 0.0), MAX_SPEED)
    ego.heading += ego.speed / WHEELBASE * math.tan(delta) * DT
    ego.heading = math.atan2(math.sin(ego.heading), math.cos(ego.heading))
    ego.x += ego.speed * math.cos(ego.heading) * DT
    ego.y += ego.speed * math.sin(ego.heading) * DT

    world.tick += 1
    _step_npcs(world)
    world._update_progress()

    events: list[DrivingEvent] = []
    cur_s = world.distance_completed

    # Stop-line crossings under red.
    for inter in world.route.intersections:
        if not inter.has_light or inter.node in world._crossed_stop_lines:
            continue
        if prev_s < inter.s_entry <= cur_s:
            world._crossed_stop_lines.add(inter.node)
            if not light_is_green(inter.axis, world.tick):
                events.append(
                    DrivingEvent(
                        world.tick,
                        EventKind.RED_LIGHT_VIOLATION,
                        {"node": inter.node},
                    )
                )

    lateral = world.route_lateral_distance()
    if lateral > DEVIATION_LATERAL:
        if not world._deviating:
            world._deviating = True
            events.append(DrivingEvent(world.tick, EventKind.ROUTE_DEVIATION, {}))
    elif lateral < OFF_LANE_LATERAL + 1.0:
        world._deviating = False
    if lateral > OFF_LANE_LATERAL:
        world._emit(events, EventKind.OFF_LANE, lateral=round(lateral, 2))

    pos = ego.pos
    if (
        world.nearest_lane_distance(pos) > LAYOUT_CLEARANCE
        and world.nearest_node_distance(pos) > INTERSECTION_FREE_RADIUS
    ):
        events.append(DrivingEvent(world.tick, EventKind.COLLISION_LAYOUT, {}))

    for veh in world.vehicles:
        if np.linalg.norm(veh.pos - pos) < 2 * VEHICLE_RADIUS:
            events.append(DrivingEvent(world.tick, EventKind.COLLISION_VEHICLE, {}))
            break
    for ped in world.pedestrians:
        if np.linalg.norm(ped.pos - pos) < VEHICLE_RADIUS + PED_RADIUS:
            events.append(DrivingEvent(world.tick, EventKind.COLLISION_PEDESTRIAN, {}))
            break

    if ego.speed < BLOCKED_SPEED:
        world._blocked_ticks += 1
    else:
        world._blocked_ticks = 0
    if world._blocked_ticks >= BLOCKED_TICKS:
        events.append(DrivingEvent(world.tick, EventKind.AGENT_BLOCKED, {}))
        events.append(DrivingEvent(world.tick, EventKind.TIMEOUT, {"blocked": True}))

    if cur_s >= world.route.total_length - COMPLETE_MARGIN:
        events.append(DrivingEvent(world.tick, EventKind.ROUTE_COMPLETE, {}))
    elif world.tick >= world.max_ticks:
        events.append(DrivingEvent(world.tick, EventKind.TIMEOUT, {}))

    if any(e.kind in TERMINAL_KINDS for e in events):
        world.done = True
    return events


def _step_npcs(world: World) -> None:
    actors = world.vehicles
    for veh in actors:
        if veh.stationary:
            continue
        target = NPC_CRUISE
        pos = veh.pos
        heading = veh.heading
        fwd = np.array([math.cos(heading), math.sin(heading)])
        # Red light ahead: the lane's end is its stop line.
        remaining = veh.arclength[-1] - veh.s
        lane_axis = "ew" if abs(fwd[0]) > abs(fwd[1]) else "ns"
        near_light = (
            veh.last_node in world.layout.lights
            and remaining < 9.0
            and not light_is_green(lane_axis, world.tick)
        )
        if near_light:
            target = 0.0
        # Actor (or ego) directly ahead.
        for other_pos in (
            [v.pos for v in actors if v is not veh]
            + [p.pos for p in world.pedestrians]
            + [world.ego.pos]
        ):
            rel = other_pos - pos
            ahead = float(rel @ fwd)
            lateral = abs(rel[0] * fwd[1] - rel[1] * fwd[0])
            if 0.0 < ahead < 8.0 and lateral < 2.0:
                target = 0.0
                break
        veh.speed = min(max(veh.speed + 2.5 * np.sign(target - veh.speed) * DT, 0.0), NPC_CRUISE)
        if abs(target - veh.speed) < 0.3:
            veh.speed = target
        veh.s += veh.speed * DT
        # Extend the path through the next intersection when the lane runs out.
        if veh.s >= veh.arclength[-1] - 0.5:
            overshoot = max(veh.s - float(veh.arclength[-1]), 0.0)
            options = [
                n for n in world.layout.neighbors(veh.last_node) if n != veh.prev_node
            ]
            if not options:
                options = world.layout.neighbors(veh.last_node)
            nxt = options[int(world.rng.integers(len(options)))]
            lane_in = world.layout.lane(veh.prev_node, veh.last_node)
            lane_out = world.layout.lane(veh.last_node, nxt)
            conn = world.layout.connector(lane_in, lane_out)
            new_pts = np.vstack([conn, lane_out.points[1:]])
            seg = np.linalg.norm(np.diff(new_pts, axis=0), axis=1)
            veh.waypoints = new_pts
            veh.arclength = np.concatenate([[0.0], np.cumsum(seg)])
            veh.s = overshoot
            veh.prev_node, veh.last_node = veh.last_node, nxt
    for ped in world.pedestrians:
        if ped.stationary:
            continue
        span = float(np.linalg.norm(ped.anchor_b - ped.anchor_a))
        if span < 1e-6:
            continue
        ped.t += ped.direction * PED_SPEED * DT / span
        if ped.t >= 1.0:
            ped.t, ped.direction = 1.0, -1
        elif ped.t <= 0.0:
            ped.t, ped.direction = 0.0, 1


# ---------------------------------------------------------------------------
# Navigation commands
# ---------------------------------------------------------------------------


def next_command(world: World) -> str:
    """High-level instruction for the current tick.

    FOLLOW between intersections; the upcoming turn command inside the
    approach window; in eval mode a corrective LEFT/RIGHT as soon as the ego
    sits on a legal lane that is not the route.
    """
    s = world.distance_completed
    lateral = world.route_lateral_distance()
    if world.eval_mode and lateral > OFF_LANE_LATERAL + 1.0:
        if world.nearest_lane_distance(world.ego.pos) <= LANE_HALF_WIDTH + 0.5:
            target = world.route.point_at(min(s + 8.0, world.route.total_length))
            rel = target - world.ego.pos
            bearing = math.atan2(rel[1], rel[0]) - world.ego.heading
            bearing = math.atan2(math.sin(bearing), math.cos(bearing))
            return "LEFT" if bearing > 0 else "RIGHT"
    for inter in world.route.intersections:
        if inter.s_entry - APPROACH_WINDOW <= s <= inter.s_exit:
            return inter.turn
    return "FOLLOW"
