"""Forecast network: grid embedding, mesh U-Net of attention blocks, output head.

The network embeds a short history of grid states, interpolates onto the
finest HEALPix mesh, runs encoder attention blocks at native resolution
before any coarsening, walks down the quad-tree (learned pooling) to a
bottleneck and back up (learned refinement plus encoder skips), then
interpolates back to the grid and predicts the next state directly.

Ensemble behavior comes from a noise vector fed to every feed-forward
block as a bias inside the SwiGLU gate; one noise draw perturbs the whole
forecast consistently.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import attention as att
from . import interp as itp
from . import tensor as T
from .healpix import HealpixMesh, build_mesh, knn_on_grid, latlon_to_xyz
from .tensor import Tensor


class ModelConfigError(ValueError):
    pass


@dataclass(frozen=True)
class StageConfig:
    nside: int
    d_model: int
    heads: int
    enc_depth: int
    dec_depth: int


@dataclass(frozen=True)
class ModelConfig:
    grid_h: int = 32
    grid_w: int = 64
    c_dyn: int = 3
    c_static: int = 2
    history: int = 2
    noise_dim: int = 32
    stages: tuple[StageConfig, ...] = (
        StageConfig(nside=16, d_model=64, heads=4, enc_depth=2, dec_depth=1),
        StageConfig(nside=8, d_model=96, heads=6, enc_depth=2, dec_depth=1),
        StageConfig(nside=4, d_model=128, heads=8, enc_depth=1, dec_depth=0),
    )
    mlp_ratio: float = 4.0
    gqa_ratio: int = 2
    local_block: int = 256
    sparse_block: int = 64
    top_n: tuple[int, ...] = (6, 4, 2)
    rope_theta: float = 10000.0
    knn: int = 24
    dtype: str = "f32"
    # 0.002 keeps every block within 1% of identity at init across the desk
    # stage widths; 0.01 (the published value) lands at 2-3% there
    residual_init_std: float = 0.002
    predict_residual: bool = False  # ablation: emit x_{t+1} - x_t instead

    def __post_init__(self):
        for a, b in zip(self.stages, self.stages[1:]):
            if a.nside != 2 * b.nside:
                raise ModelConfigError("successive stage nsides must halve")
        if len(self.top_n) != len(self.stages):
            raise ModelConfigError("top_n must list one value per stage")
        if self.stages[-1].dec_depth != 0:
            raise ModelConfigError("the bottleneck stage has no decoder blocks")

    @property
    def np_dtype(self):
        return np.float64 if self.dtype == "f64" else np.float32

    @property
    def input_width(self) -> int:
        return embed_input_width(self.history, self.c_dyn, self.c_static)

    def attention_for(self, stage_idx: int) -> att.AttentionConfig:
        """Per-stage attention constants; block sizes clamp to the mesh size."""
        stage = self.stages[stage_idx]
        npix = 12 * stage.nside ** 2
        local = min(self.local_block, npix)
        sparse = min(self.sparse_block, npix)
        top = min(self.top_n[stage_idx], npix // sparse)
        return att.AttentionConfig(
            num_heads=stage.heads,
            gqa_ratio=self.gqa_ratio,
            head_dim=stage.d_model // stage.heads,
            local_block_size=local,
            sparse_block_size=sparse,
            top_n=top,
            rope_theta=self.rope_theta,
        )


def embed_input_width(history: int, c_dyn: int, c_static: int, c_time: int = 4) -> int:
    """Per-token width fed to the embedding MLP."""
    return history * c_dyn + c_static + c_time


def compressed_variant(cfg: ModelConfig) -> ModelConfig:
    """Entry one level coarser, otherwise identical (aliasing study axis)."""
    stages = tuple(replace(s, nside=s.nside // 2) for s in cfg.stages)
    return replace(cfg, stages=stages)


def residual_variant(cfg: ModelConfig) -> ModelConfig:
    return replace(cfg, predict_residual=True)


@dataclass
class ForecastState:
    """One normalized multi-channel field on the lat-lon grid."""

    dynamic: np.ndarray        # [c_dyn, H, W]
    static: np.ndarray         # [c_static, H, W]
    time_embed: np.ndarray     # 4 sinusoidal values for this state's time
    timestamp: float = 0.0

    def __post_init__(self):
        if not np.isfinite(self.dynamic).all():
            raise ModelConfigError("non-finite values in dynamic channels")

    @property
    def grid(self) -> tuple[int, int]:
        return self.dynamic.shape[1], self.dynamic.shape[2]


def sinusoidal_time(step: float, steps_per_day: float, steps_per_year: float) -> np.ndarray:
    """Four-value encoding: sine and cosine of day and year progress."""
    day = 2 * np.pi * (step / steps_per_day)
    year = 2 * np.pi * (step / steps_per_year)
    return np.array([np.sin(day), np.cos(day), np.sin(year), np.cos(year)])


def grid_latlon(h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    """Cell-center equiangular grid: rows south to north, no duplicated poles."""
    lat = -np.pi / 2 + (np.arange(h) + 0.5) * np.pi / h
    lon = np.arange(w) * 2 * np.pi / w
    return lat, lon


# parameter names drawn from these families get the near-zero residual init
_RESIDUAL_KEYS = ("attn.w_o", "ffn.w_gate", "ffn.w_noise", "noise.w_z",
                  "refine.", ".refine")


class Model:
    """Immutable geometry + parameter schema; forward is a pure function."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        self.meshes: list[HealpixMesh] = [build_mesh(s.nside) for s in cfg.stages]
        glat, glon = grid_latlon(cfg.grid_h, cfg.grid_w)
        self.grid_lat, self.grid_lon = glat, glon
        lat2, lon2 = np.meshgrid(glat, glon, indexing="ij")
        self.grid_xyz = latlon_to_xyz(lat2.ravel(), lon2.ravel())
        self.neighbors = knn_on_grid(self.meshes[0], self.grid_xyz, k=cfg.knn)

        # child-minus-parent offsets for each coarsening step, [N_parent, 12]
        self.delta_p = []
        for fine, coarse in zip(self.meshes, self.meshes[1:]):
            d = fine.xyz.reshape(coarse.npix, 4, 3) - coarse.xyz[:, None, :]
            self.delta_p.append(d.reshape(coarse.npix, 12))

        self.attn_cfgs = [cfg.attention_for(i) for i in range(len(cfg.stages))]
        self._schema = self._build_schema()

    # ------------------------------------------------------------------
    # parameters

    def _build_schema(self) -> dict[str, tuple[int, ...]]:
        cfg = self.cfg
        d0 = cfg.stages[0].d_model
        schema: dict[str, tuple[int, ...]] = {}

        def linear(name, din, dout, bias=False):
            schema[name + ".w"] = (din, dout)
            if bias:
                schema[name + ".b"] = (dout,)

        linear("embed.l1", cfg.input_width, d0, bias=True)
        linear("embed.l2", d0, d0, bias=True)
        for name in ("w_k", "w_v", "w_o"):
            schema[f"interp_in.{name}"] = (d0, d0)
        schema["interp_in.w_q"] = (3, d0)
        schema["noise.w_z"] = (cfg.noise_dim, cfg.noise_dim)

        def block(prefix, stage_idx):
            s = cfg.stages[stage_idx]
            acfg = self.attn_cfgs[stage_idx]
            d = s.d_model
            d_ff = int(round(d * cfg.mlp_ratio))
            schema[f"{prefix}.attn.w_q"] = (d, acfg.num_heads * acfg.head_dim)
            schema[f"{prefix}.attn.w_k"] = (d, acfg.kv_heads * acfg.head_dim)
            schema[f"{prefix}.attn.w_v"] = (d, acfg.kv_heads * acfg.head_dim)
            schema[f"{prefix}.attn.w_o"] = (acfg.num_heads * acfg.head_dim, d)
            schema[f"{prefix}.attn.w_gate"] = (d, 3 * acfg.num_heads)
            schema[f"{prefix}.attn.b_gate"] = (3 * acfg.num_heads,)
            schema[f"{prefix}.ffn.w_gate"] = (d, d_ff)
            schema[f"{prefix}.ffn.w_value"] = (d, d_ff)
            schema[f"{prefix}.ffn.w_out"] = (d_ff, d)
            schema[f"{prefix}.ffn.w_noise"] = (cfg.noise_dim, d_ff)

        for i, s in enumerate(cfg.stages):
            for e in range(s.enc_depth):
                block(f"enc{i}.{e}", i)
            if i + 1 < len(cfg.stages):
                schema[f"coarsen{i}.w_x"] = (4 * s.d_model, cfg.stages[i + 1].d_model)
                schema[f"coarsen{i}.w_p"] = (12, cfg.stages[i + 1].d_model)
                schema[f"refine{i}.w_x"] = (cfg.stages[i + 1].d_model, 4 * s.d_model)
                schema[f"refine{i}.w_p"] = (12, 4 * s.d_model)
                for e in range(s.dec_depth):
                    block(f"dec{i}.{e}", i)

        for name in ("w_k", "w_v", "w_o"):
            schema[f"interp_out.{name}"] = (d0, d0)
        schema["interp_out.w_q"] = (3, d0)
        linear("head.l1", d0, d0, bias=True)
        linear("head.l2", d0, cfg.c_dyn, bias=True)
        return schema

    @property
    def param_names(self) -> list[str]:
        return list(self._schema)

    def init_params(self, seed: int = 0) -> dict[str, Tensor]:
        """Deterministic init: N(0, sigma) with sigma from the fan rule,
        near-zero for residual-path layers, zero biases."""
        rng = np.random.default_rng(np.random.SeedSequence(seed))
        dt = self.cfg.np_dtype
        params: dict[str, Tensor] = {}
        for name, shape in self._schema.items():
            if len(shape) == 1:
                arr = np.zeros(shape, dtype=dt)
            else:
                sigma = init_sigma(name, shape, self.cfg.residual_init_std)
                arr = (rng.standard_normal(shape) * sigma).astype(dt)
            params[name] = Tensor(arr, requires_grad=True)
        return params

    # ------------------------------------------------------------------
    # forward pieces

    def _interp_op(self, params, prefix, direction) -> itp.InterpOperator:
        mesh = self.meshes[0]
        if direction == "in":
            return itp.build_operator(
                self.grid_xyz, mesh.xyz, self.neighbors.mesh_from_grid,
                params[f"{prefix}.w_q"], params[f"{prefix}.w_k"],
                params[f"{prefix}.w_v"], params[f"{prefix}.w_o"])
        return itp.build_operator(
            mesh.xyz, self.grid_xyz, self.neighbors.grid_from_mesh,
            params[f"{prefix}.w_q"], params[f"{prefix}.w_k"],
            params[f"{prefix}.w_v"], params[f"{prefix}.w_o"])

    def embed_inputs(self, params, history, target_time_embed) -> Tensor:
        """Concatenate history/static/time channels and run the embed MLP."""
        cfg = self.cfg
        if len(history) != cfg.history:
            raise ModelConfigError(
                f"history length {len(history)} != configured {cfg.history}")
        h, w = history[0].grid
        if (h, w) != (cfg.grid_h, cfg.grid_w):
            raise ModelConfigError("history grid does not match config")
        dt = cfg.np_dtype
        cols = [s.dynamic.reshape(cfg.c_dyn, -1).T for s in history]
        cols.append(history[0].static.reshape(cfg.c_static, -1).T)
        cols.append(np.broadcast_to(np.asarray(target_time_embed, dtype=dt),
                                    (h * w, 4)))
        x = Tensor(np.concatenate(cols, axis=1).astype(dt))
        y = T.rmsnorm(T.add(T.matmul(x, params["embed.l1.w"]), params["embed.l1.b"]))
        y = T.silu(y)
        y = T.rmsnorm(T.add(T.matmul(y, params["embed.l2.w"]), params["embed.l2.b"]))
        return y

    def coarsen(self, x: Tensor, stage_idx: int, params) -> Tensor:
        """Learned pooling of four children into their parent, then norm."""
        bb, n, d = x.shape
        stacked = x.reshape((bb, n // 4, 4 * d))
        dp = Tensor(self.delta_p[stage_idx].astype(x.dtype))
        pooled = T.add(T.matmul(stacked, params[f"coarsen{stage_idx}.w_x"]),
                       T.matmul(dp, params[f"coarsen{stage_idx}.w_p"]))
        return T.rmsnorm(pooled)

    def refine(self, x: Tensor, stage_idx: int, params, skip: Tensor) -> Tensor:
        """Each parent predicts its four children; skip added, then norm."""
        bb, n, d = x.shape
        dp = Tensor(self.delta_p[stage_idx].astype(x.dtype))
        spread = T.add(T.matmul(x, params[f"refine{stage_idx}.w_x"]),
                       T.matmul(dp, params[f"refine{stage_idx}.w_p"]))
        children = spread.reshape((bb, n * 4, spread.shape[-1] // 4))
        return T.rmsnorm(T.add(children, skip))

    def _attn_weights(self, params, prefix) -> att.AttentionWeights:
        return att.AttentionWeights(
            w_q=params[f"{prefix}.attn.w_q"], w_k=params[f"{prefix}.attn.w_k"],
            w_v=params[f"{prefix}.attn.w_v"], w_o=params[f"{prefix}.attn.w_o"],
            w_gate=params[f"{prefix}.attn.w_gate"], b_gate=params[f"{prefix}.attn.b_gate"])

    def transformer_block(self, x: Tensor, stage_idx: int, prefix: str, params,
                          z_tilde: Tensor | None) -> Tensor:
        """Pre-norm attention + noise-gated SwiGLU, both residual."""
        mesh = self.meshes[stage_idx]
        acfg = self.attn_cfgs[stage_idx]
        out = att.bsa_forward(T.rmsnorm(x), self._attn_weights(params, prefix),
                              acfg, positions=(mesh.lat, mesh.lon))
        x = T.add(x, out.out)
        d_ff = params[f"{prefix}.ffn.w_gate"].shape[1]
        if z_tilde is None:
            z_bias = Tensor(np.zeros((1, 1, d_ff), dtype=x.dtype))
        else:
            z_bias = T.matmul(z_tilde, params[f"{prefix}.ffn.w_noise"])
            z_bias = z_bias.reshape((z_bias.shape[0], 1, d_ff))
        ffn = T.swiglu_gated(T.rmsnorm(x), z_bias, params[f"{prefix}.ffn.w_gate"],
                             params[f"{prefix}.ffn.w_value"], params[f"{prefix}.ffn.w_out"])
        return T.add(x, ffn)

    # ------------------------------------------------------------------

    def forward(self, params, history, target_time_embed,
                z: np.ndarray | None = None) -> Tensor:
        """Predict the next normalized state.

        ``z`` is [members, noise_dim] (or None for zero noise and a single
        member). Returns [members, c_dyn, H, W]; members evolve identically
        until the noise projections are nonzero.
        """
        cfg = self.cfg
        members = 1 if z is None else int(np.asarray(z).shape[0])

        tokens = self.embed_inputs(params, history, target_time_embed)
        x = itp.interpolate(tokens, self._interp_op(params, "interp_in", "in"))
        x = T.gather(x.reshape((1,) + x.shape), np.zeros(members, np.int64), axis=0)

        if z is None:
            z_tilde = None
        else:
            zt = Tensor(np.asarray(z, dtype=cfg.np_dtype).reshape(members, cfg.noise_dim))
            z_tilde = T.matmul(zt, params["noise.w_z"])

        skips = []
        for i, stage in enumerate(cfg.stages):
            for e in range(stage.enc_depth):
                x = self.transformer_block(x, i, f"enc{i}.{e}", params, z_tilde)
            if i + 1 < len(cfg.stages):
                skips.append(x)
                x = self.coarsen(x, i, params)

        for i in range(len(cfg.stages) - 2, -1, -1):
            x = self.refine(x, i, params, skips[i])
            for e in range(cfg.stages[i].dec_depth):
                x = self.transformer_block(x, i, f"dec{i}.{e}", params, z_tilde)

        x = T.rmsnorm(x)
        g = itp.interpolate(x, self._interp_op(params, "interp_out", "out"))
        y = T.silu(T.add(T.matmul(T.rmsnorm(g), params["head.l1.w"]), params["head.l1.b"]))
        y = T.add(T.matmul(y, params["head.l2.w"]), params["head.l2.b"])
        y = T.transpose(y, (0, 2, 1)).reshape((members, cfg.c_dyn, cfg.grid_h, cfg.grid_w))
        if cfg.predict_residual:
            y = T.add(y, Tensor(history[-1].dynamic[None].astype(cfg.np_dtype)))
        return y


def init_sigma(name: str, shape: tuple[int, ...], residual_std: float) -> float:
    """Init scale for a weight matrix: the fan rule, or the near-zero scale
    for layers feeding residual streams (gate of SwiGLU, attention output,
    noise projections, upsampling)."""
    if any(key in name for key in _RESIDUAL_KEYS):
        return residual_std
    din, dout = shape
    return (1.0 / np.sqrt(din)) * min(1.0, np.sqrt(dout / din))


# ----------------------------------------------------------------------
# flat key/value config files

def config_to_text(cfg: ModelConfig) -> str:
    lines = []
    for key in ("grid_h", "grid_w", "c_dyn", "c_static", "history", "noise_dim",
                "mlp_ratio", "gqa_ratio", "local_block", "sparse_block",
                "rope_theta", "knn", "dtype", "residual_init_std",
                "predict_residual"):
        lines.append(f"{key} = {getattr(cfg, key)}")
    stages = ",".join(f"{s.nside}:{s.d_model}:{s.heads}:{s.enc_depth}:{s.dec_depth}"
                      for s in cfg.stages)
    lines.append(f"stages = {stages}")
    lines.append(f"top_n = {','.join(str(t) for t in cfg.top_n)}")
    return "\n".join(lines) + "\n"


def config_from_text(text: str, overrides: dict | None = None) -> ModelConfig:
    raw: dict[str, str] = {}
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ModelConfigError(f"bad config line: {line!r}")
        key, val = (part.strip() for part in line.split("=", 1))
        raw[key] = val
    if overrides:
        raw.update({k: str(v) for k, v in overrides.items()})

    def get(key, cast, default):
        return cast(raw[key]) if key in raw else default

    stages = ModelConfig().stages
    if "stages" in raw:
        parts = []
        for chunk in raw["stages"].split(","):
            ns, d, h, e, dd = (int(v) for v in chunk.split(":"))
            parts.append(StageConfig(ns, d, h, e, dd))
        stages = tuple(parts)
    top_n = ModelConfig().top_n
    if "top_n" in raw:
        top_n = tuple(int(v) for v in raw["top_n"].split(","))

    return ModelConfig(
        grid_h=get("grid_h", int, 32), grid_w=get("grid_w", int, 64),
        c_dyn=get("c_dyn", int, 3), c_static=get("c_static", int, 2),
        history=get("history", int, 2), noise_dim=get("noise_dim", int, 32),
        stages=stages, mlp_ratio=get("mlp_ratio", float, 4.0),
        gqa_ratio=get("gqa_ratio", int, 2),
        local_block=get("local_block", int, 256),
        sparse_block=get("sparse_block", int, 64), top_n=top_n,
        rope_theta=get("rope_theta", float, 10000.0), knn=get("knn", int, 24),
        dtype=get("dtype", str, "f32"),
        residual_init_std=get("residual_init_std", float, 0.01),
        predict_residual=get("predict_residual", lambda v: v.lower() == "true", False),
    )
