"""
Network components for PestVL-Net.
"""

from .spectral import SaliencyMap, saliency_map
from .partition import SaliencyPartitioner, PartitionState, TokenSequence, WindowLayout
from .rwkv import GAVRWKVBlock, ga_wkv, ga_wkv_scan
from .fusion import VLFBlock, cross_attention
from .network import PestVLNet

__all__ = [
    "SaliencyMap",
    "saliency_map",
    "SaliencyPartitioner",
    "PartitionState",
    "TokenSequence",
    "WindowLayout",
    "GAVRWKVBlock",
    "ga_wkv",
    "ga_wkv_scan",
    "VLFBlock",
    "cross_attention",
    "PestVLNet",
]
