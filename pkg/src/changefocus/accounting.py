"""Parameter and multiply-accumulate accounting.

MACs are counted analytically from tensor shapes during one forward pass:
convolutions, linear projections, and the attention matrix products
(including both agent stages). Normalizations, activations, interpolation
and elementwise arithmetic are not counted.
"""

from __future__ import annotations

import torch
import torch.nn as nn

from .config import ModelConfig
from .dcfm import AgentAttention, agent_attention_macs, agent_grid, softmax_attention_macs
from .decoder import ChangeDetector
from .encoder import SpatialReductionAttention


def count_module_params(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def _conv_macs(m: nn.Conv2d, out: torch.Tensor) -> int:
    kh, kw = m.kernel_size
    return out.numel() * (m.in_channels // m.groups) * kh * kw


def count_module_macs(module: nn.Module, *inputs: torch.Tensor) -> int:
    total = 0

    def conv_hook(m, args, out):
        nonlocal total
        total += _conv_macs(m, out)

    def linear_hook(m, args, out):
        nonlocal total
        total += out.numel() * m.in_features

    def sra_hook(m, args, out):
        nonlocal total
        x, h, w = args
        n = h * w
        reduced = n // (m.sr_ratio ** 2)
        total += x.shape[0] * m.heads * softmax_attention_macs(n, reduced, m.head_dim)

    def agent_hook(m, args, out):
        nonlocal total
        x = args[0]
        B, C, H, W = x.shape
        n = H * W
        gh, gw = agent_grid(min(m.num_agents, n), H, W)
        total += B * m.heads * agent_attention_macs(n, n, gh * gw, C // m.heads)

    handles = []
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            handles.append(m.register_forward_hook(conv_hook))
        elif isinstance(m, nn.Linear):
            handles.append(m.register_forward_hook(linear_hook))
        elif isinstance(m, SpatialReductionAttention):
            handles.append(m.register_forward_hook(sra_hook))
        elif isinstance(m, AgentAttention):
            handles.append(m.register_forward_hook(agent_hook))
    was_training = module.training
    module.eval()
    try:
        with torch.no_grad():
            module(*inputs)
    finally:
        for h in handles:
            h.remove()
        module.train(was_training)
    return total


def count_params_flops(model_cfg: ModelConfig, input_size=(256, 256), model: ChangeDetector | None = None) -> dict:
    """Exact learnable parameter count and MACs for one forward pass of a single pair."""
    model = model or ChangeDetector(model_cfg)
    H, W = input_size
    x = torch.zeros(1, model_cfg.encoder.in_channels, H, W)
    return {"params": count_module_params(model), "flops": count_module_macs(model, x, x)}


# published reference point for the full-size network at 256x256 (context only)
REFERENCE_PARAMS_M = 46.67
REFERENCE_FLOPS_G = 16.89
