"""Self-contained deterministic 2D driving world: layouts, dynamics, rendering."""

from .layout import Layout, Route, builtin_layout, route_from_id, sample_route
from .world import (
    DrivingEvent,
    EventKind,
    INFRACTION_KINDS,
    ScenarioConfig,
    TERMINAL_KINDS,
    TICK_RATE,
    WEATHER_HELDOUT,
    WEATHER_TRAIN,
    World,
    light_is_green,
    next_command,
    spawn_scenario,
    step,
)
from .render import apply_weather, frame_to_tensor, render
from .expert import expert_policy

__all__ = [
    "Layout",
    "Route",
    "builtin_layout",
    "route_from_id",
    "sample_route",
    "DrivingEvent",
    "EventKind",
    "INFRACTION_KINDS",
    "ScenarioConfig",
    "TERMINAL_KINDS",
    "TICK_RATE",
    "WEATHER_HELDOUT",
    "WEATHER_TRAIN",
    "World",
    "light_is_green",
    "next_command",
    "spawn_scenario",
    "step",
    "render",
    "apply_weather",
    "frame_to_tensor",
    "expert_policy",
]
