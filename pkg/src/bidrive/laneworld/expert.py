"""Scripted privileged expert: pure-pursuit steering plus a braking rule stack.

The expert reads full world state (route geometry, light phases, actor
positions). Longitudinal control tracks a cruise speed, slowed for upcoming
turns and forced to zero for red lights, lead vehicles, or pedestrians on the
path ahead. It is the demonstration source the imitation learner clones.
"""

from __future__ import annotations

import math

import numpy as np

from ..decision import Action
from .world import (
    MAX_STEER_RAD,
    WHEELBASE,
    World,
    light_is_green,
)

CRUISE_SPEED = 6.0        # m/s
TURN_SPEED = 2.8          # m/s near intersections
LOOKAHEAD_MIN = 3.0
LOOKAHEAD_MAX = 8.0
RED_BRAKE_DISTANCE = 11.0  # m before the stop line where braking starts
LEAD_STOP_GAP = 9.0
LEAD_SLOW_GAP = 14.0
PED_STOP_AHEAD = 12.0
PED_CORRIDOR = 2.6
SPEED_GAIN = 0.6


def expert_policy(world: World) -> Action:
    route = world.route
    ego = world.ego
    s = world.distance_completed

    # Pure pursuit toward a speed-scaled lookahead point on the route.
    lookahead = min(max(1.2 * ego.speed + 2.0, LOOKAHEAD_MIN), LOOKAHEAD_MAX)
    target = route.point_at(min(s + lookahead, route.total_length))
    rel = target - ego.pos
    alpha = math.atan2(rel[1], rel[0]) - ego.heading
    alpha = math.atan2(math.sin(alpha), math.cos(alpha))
    dist = max(float(np.linalg.norm(rel)), 1e-3)
    delta = math.atan2(2.0 * WHEELBASE * math.sin(alpha), dist)
    steer = min(max(delta / MAX_STEER_RAD, -1.0), 1.0)

    target_speed = CRUISE_SPEED

    # Slow down when the path curves within the next stretch.
    probe = route.point_at(min(s + 9.0, route.total_length))
    rel_probe = probe - ego.pos
    bend = math.atan2(rel_probe[1], rel_probe[0]) - ego.heading
    bend = abs(math.atan2(math.sin(bend), math.cos(bend)))
    if bend > 0.35:
        target_speed = min(target_speed, TURN_SPEED)

    # Red light ahead on the route: stop before the line.
    for inter in route.intersections:
        if not inter.has_light or inter.node in world._crossed_stop_lines:
            continue
        gap = inter.s_entry - s
        if gap < -1.0:
            continue
        if gap <= RED_BRAKE_DISTANCE:
            # Commit to crossing only if the light is green now and stays
            # green until the ego clears the line (the phase flips with no
            # amber period, so anticipate it).
            cross_ticks = int(gap / max(ego.speed, 3.0) * 10) + 15
            safe = all(
                light_is_green(inter.axis, world.tick + dt)
                for dt in (0, cross_ticks)
            )
            if not safe:
                target_speed = 0.0
        break

    # Lead vehicle in the route corridor ahead.
    fwd = np.array([math.cos(ego.heading), math.sin(ego.heading)])
    for veh in world.vehicles:
        rel_v = veh.pos - ego.pos
        ahead = float(rel_v @ fwd)
        lateral = abs(rel_v[0] * fwd[1] - rel_v[1] * fwd[0])
        if lateral < 2.2 and 0.0 < ahead < LEAD_STOP_GAP:
            target_speed = 0.0
        elif lateral < 2.2 and 0.0 < ahead < LEAD_SLOW_GAP:
            target_speed = min(target_speed, TURN_SPEED)

    # Pedestrian in the corridor ahead.
    for ped in world.pedestrians:
        rel_p = ped.pos - ego.pos
        ahead = float(rel_p @ fwd)
        lateral = abs(rel_p[0] * fwd[1] - rel_p[1] * fwd[0])
        if lateral < PED_CORRIDOR and 0.0 < ahead < PED_STOP_AHEAD:
            target_speed = 0.0

    accel = min(max(SPEED_GAIN * (target_speed - ego.speed), -1.0), 1.0)
    if target_speed == 0.0 and ego.speed < 0.5:
        accel = -1.0
    return Action(steer=steer, accel=accel)
