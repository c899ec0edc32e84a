"""Attribution games on small networks and Hellinger distances between their trajectory laws."""

from .net_core import NetSpec, NetSpecError, decompose_forward, forward, net_from_json, random_net
from .routing_game import RGConfig, lrp_direct, rg_attribution, rg_trajectory_mp
from .stopping_game import build_sg, sg_gradient, sg_player_values
from .trajectory_mp import LayeredMP, conditioned_survival, hellinger_backward, hellinger_forward

__version__ = "0.1.0"

__all__ = [
    "NetSpec",
    "NetSpecError",
    "net_from_json",
    "forward",
    "decompose_forward",
    "random_net",
    "RGConfig",
    "rg_attribution",
    "rg_trajectory_mp",
    "lrp_direct",
    "build_sg",
    "sg_gradient",
    "sg_player_values",
    "LayeredMP",
    "hellinger_backward",
    "hellinger_forward",
    "conditioned_survival",
]
