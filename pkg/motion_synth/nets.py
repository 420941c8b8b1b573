"""
Dense ELU networks with plain, diagonal-Gaussian and mixture-of-experts
heads, in float64 torch.
"""
import logging
from typing import NamedTuple, Tuple, Union, Sequence

import numpy as np
import torch
from torch import nn

from . import utils

logger = logging.getLogger(__name__)

NET_FORMAT = "motion_synth-net-v1"
HEADS = ("plain", "gaussian", "moe")
LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0
DTYPE = torch.float64


class NetSpec(NamedTuple):
    input_dim: int
    hidden: Tuple[int, ...]
    output_dim: int
    head: str = "plain"
    num_experts: int = 6
    gate_hidden: Tuple[int, ...] = (64,)
    head_scale: float = 1.0

    def validate(self):
        widths = (self.input_dim, self.output_dim) + tuple(self.hidden)
        if self.head == "moe":
            widths += tuple(self.gate_hidden)
            if self.num_experts != 6:
                raise ValueError(f"mixture heads use 6 experts, got {self.num_experts}")
        if any(w < 1 for w in widths):
            raise ValueError(f"layer widths must be >= 1, got {widths}")
        if self.head not in HEADS:
            raise ValueError(f"head must be one of {HEADS}, got {self.head!r}")
        return self

    def fingerprint(self):
        return utils.fingerprint(self._asdict())


class GaussianOut(NamedTuple):
    mean: torch.Tensor
    log_std: torch.Tensor

    @property
    def std(self):
        return torch.exp(self.log_std)


def mlp(input_dim: int, hidden: Sequence[int], output_dim: int) -> nn.Sequential:
    layers = []
    width = input_dim
    for h in hidden:
        layers += [nn.Linear(width, h), nn.ELU()]
        width = h
    layers.append(nn.Linear(width, output_dim))
    return nn.Sequential(*layers)


def _lecun_uniform_(module):
    for layer in module.modules():
        if isinstance(layer, nn.Linear):
            bound = np.sqrt(3.0 / layer.in_features)
            nn.init.uniform_(layer.weight, -bound, bound)
            nn.init.zeros_(layer.bias)


def _scale_last_(sequential, scale):
    with torch.no_grad():
        sequential[-1].weight.mul_(scale)


class Network(nn.Module):
    def __init__(self, spec: NetSpec, seed: int = 0):
        super().__init__()
        self.spec = spec.validate()
        out = spec.output_dim if spec.head == "plain" else 2 * spec.output_dim
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            if spec.head == "moe":
                self.experts = nn.ModuleList(
                    mlp(spec.input_dim, spec.hidden, out) for _ in range(spec.num_experts))
                self.gate = mlp(spec.input_dim, spec.gate_hidden, spec.num_experts)
                _lecun_uniform_(self)
                for expert in self.experts:
                    _scale_last_(expert, spec.head_scale)
            else:
                self.body = mlp(spec.input_dim, spec.hidden, out)
                _lecun_uniform_(self)
                _scale_last_(self.body, spec.head_scale)
        self.to(DTYPE)

    def gating(self, x: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.gate(x), dim=-1)

    def forward(self, x: torch.Tensor) -> Union[torch.Tensor, GaussianOut]:
        if self.spec.head == "plain":
            return self.body(x)
        if self.spec.head == "gaussian":
            raw = self.body(x)
        else:
            weights = self.gating(x)
            outputs = torch.stack([expert(x) for expert in self.experts], dim=-2)
            raw = (weights.unsqueeze(-1) * outputs).sum(dim=-2)
        mean, log_std = raw.chunk(2, dim=-1)
        return GaussianOut(mean, log_std.clamp(LOG_STD_MIN, LOG_STD_MAX))


def as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.to(DTYPE)
    return torch.as_tensor(np.asarray(x, dtype=float), dtype=DTYPE)


def _check_input(net: Network, x: torch.Tensor):
    if x.shape[-1] != net.spec.input_dim:
        raise ValueError(
            f"network expects inputs of width {net.spec.input_dim}, got {x.shape[-1]}")
    if not torch.all(torch.isfinite(x)):
        raise ValueError("network input contains non-finite values")


def forward(net: Network, x) -> Union[torch.Tensor, GaussianOut]:
    x = as_tensor(x)
    _check_input(net, x)
    return net(x)


def backward(net: Network, x, upstream):
    """
    Reverse-mode gradients of <net(x), upstream>. For Gaussian heads
    `upstream` is a (mean, log_std) pair. Returns (parameter gradients
    in `net.parameters()` order, input gradient).
    """
    x = as_tensor(x).detach().requires_grad_(True)
    _check_input(net, x)
    out = net(x)
    if isinstance(out, GaussianOut):
        up_mean, up_log_std = (as_tensor(u) for u in upstream)
        if up_mean.shape != out.mean.shape or up_log_std.shape != out.log_std.shape:
            raise ValueError("upstream gradient does not match the output shape")
        scalar = (out.mean * up_mean).sum() + (out.log_std * up_log_std).sum()
    else:
        upstream = as_tensor(upstream)
        if upstream.shape != out.shape:
            raise ValueError(f"upstream gradient {tuple(upstream.shape)} != output {tuple(out.shape)}")
        scalar = (out * upstream).sum()
    params = list(net.parameters())
    grads = torch.autograd.grad(scalar, params + [x], allow_unused=True)
    param_grads = [
        torch.zeros_like(p) if g is None else g for p, g in zip(params, grads[:-1])]
    return param_grads, grads[-1]


def reparam_sample(g: GaussianOut, eps) -> torch.Tensor:
    eps = as_tensor(eps)
    if eps.shape != g.mean.shape:
        raise ValueError(f"noise shape {tuple(eps.shape)} != {tuple(g.mean.shape)}")
    return g.mean + torch.exp(g.log_std) * eps


def standard_normal(like: GaussianOut) -> GaussianOut:
    return GaussianOut(torch.zeros_like(like.mean), torch.zeros_like(like.log_std))


def kl_diag(p: GaussianOut, q: GaussianOut) -> torch.Tensor:
    """KL(p || q) of diagonal Gaussians, summed over the last axis"""
    if p.mean.shape != q.mean.shape:
        raise ValueError(f"KL between shapes {tuple(p.mean.shape)} and {tuple(q.mean.shape)}")
    var_ratio = torch.exp(2 * (p.log_std - q.log_std))
    mean_term = (p.mean - q.mean) ** 2 * torch.exp(-2 * q.log_std)
    return 0.5 * (var_ratio + mean_term - 1).sum(-1) + (q.log_std - p.log_std).sum(-1)


def gaussian_nll(g: GaussianOut, target: torch.Tensor) -> torch.Tensor:
    z = (target - g.mean) * torch.exp(-g.log_std)
    return (0.5 * z ** 2 + g.log_std + 0.5 * np.log(2 * np.pi)).sum(-1)


def make_optimizer(params, lr: float) -> torch.optim.Adam:
    return torch.optim.Adam(params, lr=lr, betas=(0.9, 0.999), eps=1e-8)


def optimizer_step(optimizer: torch.optim.Optimizer, params, grads):
    params = list(params)
    grads = list(grads)
    if len(params) != len(grads):
        raise ValueError(f"{len(params)} parameters but {len(grads)} gradients")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ValueError(f"gradient {tuple(g.shape)} does not match parameter {tuple(p.shape)}")
        p.grad = g.detach().clone()
    optimizer.step()
    optimizer.zero_grad(set_to_none=True)


def flatten_params(net: Network) -> torch.Tensor:
    return nn.utils.parameters_to_vector(net.parameters()).detach().clone()


def load_params(net: Network, vector):
    vector = as_tensor(vector)
    expected = sum(p.numel() for p in net.parameters())
    if vector.numel() != expected:
        raise ValueError(f"parameter vector has {vector.numel()} entries, network has {expected}")
    nn.utils.vector_to_parameters(vector, net.parameters())
    return net


def checkpoint(net: Network) -> dict:
    return {
        'format': NET_FORMAT,
        'spec': net.spec._asdict(),
        'fingerprint': net.spec.fingerprint(),
        'params': flatten_params(net),
    }


def from_checkpoint(data: dict) -> Network:
    if data.get('format') != NET_FORMAT:
        raise ValueError(f"expected a {NET_FORMAT!r} checkpoint, found {data.get('format')!r}")
    spec = NetSpec(**{
        k: tuple(v) if isinstance(v, list) else v for k, v in data['spec'].items()})
    if spec.fingerprint() != data['fingerprint']:
        raise ValueError(
            f"checkpoint fingerprint {data['fingerprint']} does not match its spec "
            f"{spec.fingerprint()}")
    return load_params(Network(spec), data['params'])


def save_checkpoint(path, net: Network):
    torch.save(checkpoint(net), path)
    return path


def load_checkpoint(path) -> Network:
    return from_checkpoint(torch.load(path, weights_only=False))
