"""The two encoders of the joint embedding space.

The moment encoder projects clip features into the embedding dimension,
max-pools them to the profile's base length, and runs the hierarchical conv
stack; the unit activations of every used layer (and branch) are the candidate
moment embeddings, all produced in one forward pass. The sentence encoder is a
two-layer feed-forward net with batch norm between the layers.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .errors import ConfigError
from .geometry import DatasetProfile


@dataclass
class ModelParams:
    """All learnable weights plus the batch-norm running statistics."""

    profile_name: str
    clip_dim: int
    sent_dim: int
    embed_dim: int
    hidden_dim: int
    input_w: nc.Parameter
    input_b: nc.Parameter
    conv_w: list[nc.Parameter]
    conv_b: list[nc.Parameter]
    branch_w: nc.Parameter | None
    branch_b: nc.Parameter | None
    sent_w1: nc.Parameter
    sent_b1: nc.Parameter
    bn_gamma: nc.Parameter
    bn_beta: nc.Parameter
    sent_w2: nc.Parameter
    sent_b2: nc.Parameter
    bn_state: nc.BatchNormState = field(repr=False)

    def parameters(self) -> list[nc.Parameter]:
        """Every learnable parameter, in a fixed order (drives Adam and checkpoints)."""
        out = [self.input_w, self.input_b]
        for w, b in zip(self.conv_w, self.conv_b):
            out.extend([w, b])
        if self.branch_w is not None:
            out.extend([self.branch_w, self.branch_b])
        out.extend(
            [self.sent_w1, self.sent_b1, self.bn_gamma, self.bn_beta, self.sent_w2, self.sent_b2]
        )
        return out

    def weight_parameters(self) -> list[nc.Parameter]:
        """The matrices/kernels that enter the L2 regularizer (no biases, no BN)."""
        out = [self.input_w] + list(self.conv_w)
        if self.branch_w is not None:
            out.append(self.branch_w)
        out.extend([self.sent_w1, self.sent_w2])
        return out

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()


def _glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape)


def init_params(
    seed: int,
    profile: DatasetProfile,
    clip_dim: int,
    sent_dim: int,
    embed_dim: int,
    hidden_dim: int | None = None,
) -> ModelParams:
    """Deterministic initialization: fan-based uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    d = embed_dim
    h = hidden_dim or embed_dim

    input_w = nc.Parameter(_glorot(rng, (clip_dim, d), clip_dim, d), "input.w")
    input_b = nc.Parameter(np.zeros(d), "input.b")
    conv_w, conv_b = [], []
    for i, layer in enumerate(profile.layers):
        k = layer.kernel
        conv_w.append(nc.Parameter(_glorot(rng, (d, d, k), d * k, d * k), f"conv{i}.w"))
        conv_b.append(nc.Parameter(np.zeros(d), f"conv{i}.b"))
    branch_w = branch_b = None
    if profile.branch is not None:
        k = profile.branch.window_units
        branch_w = nc.Parameter(_glorot(rng, (d, d, k), d * k, d * k), "branch.w")
        branch_b = nc.Parameter(np.zeros(d), "branch.b")
    sent_w1 = nc.Parameter(_glorot(rng, (sent_dim, h), sent_dim, h), "sent.w1")
    sent_b1 = nc.Parameter(np.zeros(h), "sent.b1")
    bn_gamma = nc.Parameter(np.ones(h), "sent.bn_gamma")
    bn_beta = nc.Parameter(np.zeros(h), "sent.bn_beta")
    sent_w2 = nc.Parameter(_glorot(rng, (h, d), h, d), "sent.w2")
    sent_b2 = nc.Parameter(np.zeros(d), "sent.b2")

    return ModelParams(
        profile_name=profile.name,
        clip_dim=clip_dim,
        sent_dim=sent_dim,
        embed_dim=d,
        hidden_dim=h,
        input_w=input_w,
        input_b=input_b,
        conv_w=conv_w,
        conv_b=conv_b,
        branch_w=branch_w,
        branch_b=branch_b,
        sent_w1=sent_w1,
        sent_b1=sent_b1,
        bn_gamma=bn_gamma,
        bn_beta=bn_beta,
        sent_w2=sent_w2,
        sent_b2=sent_b2,
        bn_state=nc.BatchNormState(h),
    )


def check_compatible(params: ModelParams, profile: DatasetProfile) -> None:
    if len(params.conv_w) != len(profile.layers):
        raise ConfigError(
            f"params built for {len(params.conv_w)} conv layers, profile has {len(profile.layers)}"
        )
    for i, (w, layer) in enumerate(zip(params.conv_w, profile.layers)):
        if w.shape[2] != layer.kernel:
            raise ConfigError(f"conv layer {i}: kernel {w.shape[2]} in params vs {layer.kernel}")
    if (params.branch_w is None) != (profile.branch is None):
        raise ConfigError("params and profile disagree about the branch layer")
    if params.branch_w is not None and params.branch_w.shape[2] != profile.branch.window_units:
        raise ConfigError("branch kernel width does not match the profile window")


def encode_moments(clip_features, params: ModelParams, profile: DatasetProfile) -> nc.Tensor:
    """Embed every candidate moment of one video in a single pass.

    ``clip_features`` is [clip_dim, input_clips] (already length-fitted). The
    result is [candidate_count, embed_dim], row i aligned with entry i of
    ``enumerate_candidates(profile)``.
    """
    check_compatible(params, profile)
    x = nc.as_tensor(clip_features)
    if x.shape != (params.clip_dim, profile.input_clips):
        raise ConfigError(
            f"clip features must be [{params.clip_dim}, {profile.input_clips}], got {x.shape}"
        )
    projected = nc.relu(nc.linear(nc.transpose(x), params.input_w, params.input_b))
    base = nc.maxpool1d(nc.transpose(projected), profile.pool_window, profile.pool_stride)

    h = base
    layer_outs = []
    for layer, w, b in zip(profile.layers, params.conv_w, params.conv_b):
        h = nc.relu(nc.conv1d(h, w, b, stride=layer.stride))
        layer_outs.append(h)

    parts = [nc.transpose(layer_outs[i]) for i in profile.used_layers]
    if profile.branch is not None:
        # The branch slides over the full-resolution first layer.
        branch_in = layer_outs[0] if layer_outs else base
        bh = nc.relu(nc.conv1d(branch_in, params.branch_w, params.branch_b,
                               stride=profile.branch.stride_units))
        parts.append(nc.transpose(bh))
    return nc.concat_rows(parts)


def encode_sentence(sent_features, params: ModelParams, mode: str,
                    update_stats: bool = True) -> nc.Tensor:
    """Project sentence features [B, sent_dim] into the embedding space [B, embed_dim]."""
    x = nc.as_tensor(sent_features)
    if x.data.ndim != 2 or x.shape[1] != params.sent_dim:
        raise ConfigError(f"sentence features must be [B, {params.sent_dim}], got {x.shape}")
    hidden = nc.relu(nc.linear(x, params.sent_w1, params.sent_b1))
    normed = nc.batchnorm(hidden, params.bn_gamma, params.bn_beta, params.bn_state,
                          mode, update_stats=update_stats)
    return nc.linear(normed, params.sent_w2, params.sent_b2)
