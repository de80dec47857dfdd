"""FG-Net: bottlenecked residual FG-Conv encoder, non-local attention at the
coarsest stage, per-stage segmentation heads fused at full resolution and a
scene-level presence head.

Stage 0 runs on the full input cloud; stage s > 0 runs on plan stage s-1,
so an h-stage network consumes a plan with h-1 reductions.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .attention import GlobalAttention, attention_scores, global_attend
from .fgconv import DEFAULT_K, FgConvLayer, fg_conv_forward
from .geometry import PointCloud, build_index, knn_neighbors, radius_neighbors
from .losses import (LossReport, context_loss, kernel_contain_loss, kernel_fit_loss,
                     kernel_repulsive_loss, presence_targets, seg_loss)
from .sampling import (GumbelSampler, SamplingPlan, build_plan, default_schedule, extend_plan,
                       gumbel_soft_select, straight_through)


class ConfigError(ValueError):
    pass


def _parse_list(text: str, kind):
    text = text.strip()
    return [kind(v) for v in text.split(",") if v.strip()] if text else []


@dataclass
class NetworkConfig:
    stages: int = 5
    bottleneck: int = 8
    widths: list[int] = field(default_factory=lambda: [32, 64, 128, 256, 256])
    radii: list[float] = field(default_factory=lambda: [0.1 * 2.5 ** s for s in range(5)])
    neighbors: int = DEFAULT_K
    num_classes: int = 13
    in_features: int = 0
    alpha: list[float] = field(default_factory=lambda: [1.0] * 5)
    beta: float = 1.0
    blocks_per_stage: int = 2
    sampling: str = "igsam"
    ratio: int = 5
    c_mid: int = 1
    use_pfm: bool = True
    use_gcm: bool = True
    use_ag: bool = True
    use_global: bool = True
    use_context: bool = True
    freeze_kernels: bool = False
    rowwise_softmax: bool = False
    upsample: str = "nearest"
    gss_transfer: str = "straight_through"
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        h = self.stages
        if h < 2:
            raise ConfigError(f"stages must be >= 2, got {h}")
        if self.bottleneck < 1:
            raise ConfigError(f"bottleneck must be >= 1, got {self.bottleneck}")
        for name in ("widths", "radii", "alpha"):
            if len(getattr(self, name)) != h:
                raise ConfigError(f"{name} needs {h} entries, got {len(getattr(self, name))}")
        if any(b < a for a, b in zip(self.widths, self.widths[1:])):
            raise ConfigError(f"widths must be non-decreasing, got {self.widths}")
        if any(r <= 0 for r in self.radii):
            raise ConfigError("radii must be positive")
        if self.num_classes < 1:
            raise ConfigError("num_classes must be >= 1")
        if not (self.use_pfm or self.use_gcm):
            raise ConfigError("at least one of use_pfm / use_gcm must stay on")
        if self.upsample not in ("nearest", "idw3"):
            raise ConfigError(f"upsample must be nearest or idw3, got {self.upsample!r}")
        if self.gss_transfer not in ("straight_through", "soft"):
            raise ConfigError(f"gss_transfer must be straight_through or soft, got {self.gss_transfer!r}")

    # -- flat key=value round trip ---------------------------------------

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, list):
                v = ",".join(repr(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def field_names(cls) -> set[str]:
        return {f.name for f in dataclasses.fields(cls)}

    @classmethod
    def coerce(cls, values: dict[str, str]) -> dict:
        out = {}
        types = {f.name: f for f in dataclasses.fields(cls)}
        defaults = cls.__new__(cls)
        for f in dataclasses.fields(cls):
            setattr(defaults, f.name, f.default if f.default is not dataclasses.MISSING else f.default_factory())
        for key, raw in values.items():
            if key not in types:
                raise ConfigError(f"unknown network key {key!r}")
            ref = getattr(defaults, key)
            out[key] = _coerce_like(ref, raw, key)
        return out

    @classmethod
    def from_values(cls, values: dict[str, str]) -> NetworkConfig:
        return cls(**cls.coerce(values))


def _coerce_like(ref, raw, key):
    if not isinstance(raw, str):
        return raw
    try:
        if isinstance(ref, bool):
            low = raw.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(ref, int):
            return int(raw)
        if isinstance(ref, float):
            return float(raw)
        if isinstance(ref, list):
            kind = type(ref[0]) if ref else float
            return _parse_list(raw, kind)
        return raw.strip()
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def reduced_config(stages: int = 3, num_classes: int = 3, in_features: int = 0, **overrides) -> NetworkConfig:
    """Small-width configuration for desk-scale runs and tests."""
    base = dict(
        stages=stages,
        bottleneck=2,
        widths=[16 * 2 ** min(s, 2) for s in range(stages)],
        radii=[0.12 * 2.2 ** s for s in range(stages)],
        neighbors=8,
        num_classes=num_classes,
        in_features=in_features,
        alpha=[1.0] * stages,
        blocks_per_stage=1,
    )
    base.update(overrides)
    return NetworkConfig(**base)


# -- parameter containers ----------------------------------------------------


@dataclass
class Linear:
    weight: ad.Tensor
    bias: ad.Tensor | None

    @classmethod
    def create(cls, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True,
               gain: float = 2.0) -> Linear:
        w = rng.normal(scale=np.sqrt(gain / max(n_in, 1)), size=(n_in, n_out))
        return cls(ad.parameter(w), ad.parameter(np.zeros((1, n_out))) if bias else None)

    def __call__(self, x: ad.Tensor) -> ad.Tensor:
        y = ad.matmul(x, self.weight)
        return ad.add(y, self.bias) if self.bias is not None else y

    def parameters(self) -> dict[str, ad.Tensor]:
        out = {"w": self.weight}
        if self.bias is not None:
            out["b"] = self.bias
        return out


@dataclass
class ResidualBlock:
    """down-projection to D_out/M -> FG-Conv -> up-projection, plus skip."""

    down: Linear
    conv: FgConvLayer
    up: Linear
    skip: Linear | None

    @classmethod
    def create(cls, d_in: int, d_out: int, bottleneck: int, radius: float, cfg: NetworkConfig,
               rng: np.random.Generator, kernel_seed: int) -> ResidualBlock:
        mid = max(d_out // bottleneck, 1)
        conv = FgConvLayer.create(mid, mid, radius, rng, k=cfg.neighbors, use_pfm=cfg.use_pfm,
                                  use_gcm=cfg.use_gcm, use_ag=cfg.use_ag,
                                  frozen_kernel=cfg.freeze_kernels, kernel_seed=kernel_seed)
        up = Linear.create(mid, d_out, rng, gain=0.5)
        skip = Linear.create(d_in, d_out, rng, bias=False, gain=1.0) if d_in != d_out else None
        return cls(Linear.create(d_in, mid, rng), conv, up, skip)

    def parameters(self) -> dict[str, ad.Tensor]:
        out = {}
        for name, part in (("down", self.down), ("up", self.up), ("skip", self.skip)):
            if part is not None:
                out.update({f"{name}.{k}": v for k, v in part.parameters().items()})
        out.update({f"conv.{k}": v for k, v in self.conv.parameters().items()})
        return out


def rlb_forward(block: ResidualBlock, features: ad.Tensor, coords: ad.Tensor,
                neighbors: np.ndarray, traces: list | None = None) -> ad.Tensor:
    h = ad.relu(block.down(features))
    res = fg_conv_forward(block.conv, coords, h, neighbors, trace=traces is not None)
    if traces is not None:
        traces.append((block.conv, res))
        res = res.output
    branch = block.up(ad.relu(res))
    skip = block.skip(features) if block.skip is not None else features
    return ad.add(branch, skip)


# -- batch preparation ----------------------------------------------------------


@dataclass
class StageState:
    coords: np.ndarray
    neighbors: np.ndarray  # (N_s, K) padded neighbor ids
    indices: np.ndarray | None  # into the previous stage (None for stage 0)
    method: str
    interp_ids: np.ndarray | None = None  # (N_{s-1}, 3) for idw3 upsampling
    interp_w: np.ndarray | None = None


@dataclass
class Batch:
    cloud: PointCloud
    plan: SamplingPlan
    stages: list[StageState]


def neighbor_table(coords: np.ndarray, radius: float, k: int) -> np.ndarray:
    cloud = PointCloud(coords)
    index = build_index(cloud, radius)
    return radius_neighbors(index, cloud, coords, radius).padded(k)


def _idw3(coarse: np.ndarray, fine: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    cloud = PointCloud(coarse)
    extent = np.ptp(coarse, axis=0).max() if len(coarse) > 1 else 1.0
    index = build_index(cloud, max(extent / max(len(coarse) ** (1 / 3), 1.0), 1e-9))
    k = min(3, len(coarse))
    nl = knn_neighbors(index, cloud, fine, k)
    ids = nl.indices.reshape(len(fine), k)
    d = nl.distances.reshape(len(fine), k)
    w = 1.0 / (d + 1e-8)
    return ids, w / w.sum(axis=1, keepdims=True)


def prepare_stages(cloud: PointCloud, plan: SamplingPlan, cfg: NetworkConfig,
                   upto: int | None = None) -> list[StageState]:
    """Stage clouds and neighbor tables for the first ``upto`` network stages."""
    upto = cfg.stages if upto is None else upto
    states = [StageState(cloud.coords, neighbor_table(cloud.coords, cfg.radii[0], cfg.neighbors), None, "input")]
    for s in range(1, upto):
        sp = plan.stages[s - 1]
        prev = states[-1].coords
        coords = prev[sp.indices]
        st = StageState(coords, neighbor_table(coords, cfg.radii[s], cfg.neighbors), sp.indices, sp.method)
        if cfg.upsample == "idw3":
            st.interp_ids, st.interp_w = _idw3(coords, prev)
        states.append(st)
    return states


# -- the network ---------------------------------------------------------------


class FGNet:
    def __init__(self, config: NetworkConfig):
        self.config = cfg = config
        rng = np.random.default_rng(cfg.seed)
        self.stem = Linear.create(1 + cfg.in_features, cfg.widths[0], rng)
        self.blocks: list[list[ResidualBlock]] = []
        d_prev = cfg.widths[0]
        kseed = 0
        for s in range(cfg.stages):
            stage = []
            for b in range(cfg.blocks_per_stage):
                stage.append(ResidualBlock.create(d_prev, cfg.widths[s], cfg.bottleneck, cfg.radii[s],
                                                  cfg, rng, kernel_seed=cfg.seed * 1000 + kseed))
                kseed += 1
                d_prev = cfg.widths[s]
            self.blocks.append(stage)
        self.attention = GlobalAttention.create(cfg.widths[-1], rng, cfg.c_mid, cfg.rowwise_softmax)
        self.heads = [Linear.create(w, cfg.num_classes, rng, gain=1.0) for w in cfg.widths]
        self.cls_head = Linear.create(cfg.widths[-1], cfg.num_classes, rng, gain=1.0)
        self.sampler: GumbelSampler | None = None

    # -- parameters ---------------------------------------------------------

    def named_parameters(self) -> dict[str, ad.Tensor]:
        out = {f"stem.{k}": v for k, v in self.stem.parameters().items()}
        for s, stage in enumerate(self.blocks):
            for b, block in enumerate(stage):
                out.update({f"stage{s}.block{b}.{k}": v for k, v in block.parameters().items()})
        if self.config.use_global:
            out.update({f"global.{k}": v for k, v in self.attention.parameters().items()})
        for s, head in enumerate(self.heads):
            out.update({f"head{s}.{k}": v for k, v in head.parameters().items()})
        if self.config.use_context:
            out.update({f"cls.{k}": v for k, v in self.cls_head.parameters().items()})
        if self.sampler is not None:
            out["gss.weights"] = self.sampler.weights
        return out

    def all_tensors(self) -> dict[str, ad.Tensor]:
        """Every stored array, including ones disabled by ablation switches."""
        out = {f"stem.{k}": v for k, v in self.stem.parameters().items()}
        for s, stage in enumerate(self.blocks):
            for b, block in enumerate(stage):
                p = f"stage{s}.block{b}."
                out.update({p + k: v for k, v in block.parameters().items()})
                c = block.conv
                out.update({p + "conv.w_ker": c.w_ker, p + "conv.w1": c.w1, p + "conv.w2": c.w2,
                            p + "conv.kernel.deform": c.kernel.deform})
        out.update({f"global.{k}": v for k, v in self.attention.parameters().items()})
        for s, head in enumerate(self.heads):
            out.update({f"head{s}.{k}": v for k, v in head.parameters().items()})
        out.update({f"cls.{k}": v for k, v in self.cls_head.parameters().items()})
        if self.sampler is not None:
            out["gss.weights"] = self.sampler.weights
        return out

    def parameter_count(self) -> int:
        return int(sum(p.data.size for p in self.named_parameters().values()))

    def block_parameter_count(self) -> int:
        return int(sum(p.data.size for stage in self.blocks for blk in stage
                       for p in blk.parameters().values()))

    def zero_grad(self) -> None:
        for p in self.named_parameters().values():
            p.zero_grad()

    def kernel_sets(self):
        return [(f"stage{s}.block{b}", blk.conv.kernel) for s, stage in enumerate(self.blocks)
                for b, blk in enumerate(stage)]

    # -- planning -------------------------------------------------------------

    def schedule(self, n: int) -> list[int]:
        return default_schedule(n, self.config.stages - 1, self.config.ratio)

    def uses_gss(self) -> bool:
        return self.config.sampling in ("igsam", "gss")

    def ensure_sampler(self, n_select: int) -> GumbelSampler:
        width = 3 + self.config.in_features
        if self.sampler is None or self.sampler.n_select != n_select:
            if self.sampler is not None and self.sampler.n_select > n_select:
                w = self.sampler.weights.data[:n_select].copy()
                self.sampler = GumbelSampler(ad.parameter(w, "gss.weights"), self.sampler.tau, self.sampler.seed)
            else:
                fresh = GumbelSampler.init(n_select, width, self.config.seed + 7919)
                if self.sampler is not None:
                    fresh.weights.data[: self.sampler.n_select] = self.sampler.weights.data
                    fresh.tau = self.sampler.tau
                self.sampler = fresh
        return self.sampler

    def plan(self, cloud: PointCloud, seed: int, partial: bool = False) -> SamplingPlan:
        """Sampling plan for ``cloud``; ``partial`` leaves a final GSS stage to ``finish_plan``."""
        sched = self.schedule(len(cloud))
        mode = self.config.sampling
        radii = self.config.radii[:-1]
        if mode == "igsam":
            plan = build_plan(cloud, sched[:-1], "ids", seed, radii) if len(sched) > 1 else SamplingPlan(len(cloud))
            if not partial:
                self.finish_plan(plan, cloud, seed)
            return plan
        if mode == "gss":
            plan = SamplingPlan(len(cloud))
            if not partial:
                self.finish_plan(plan, cloud, seed)
            return plan
        return build_plan(cloud, sched, mode, seed, radii)

    def finish_plan(self, plan: SamplingPlan, cloud: PointCloud, seed: int) -> SamplingPlan:
        sched = self.schedule(len(cloud))
        while len(plan.stages) < len(sched):
            s = len(plan.stages)
            count = sched[s]
            if self.config.sampling == "igsam" and s < len(sched) - 1:
                extend_plan(plan, cloud, count, "ids", seed + s, self.config.radii[s])
            else:
                sampler = self.ensure_sampler(count)
                sampler.seed = seed
                extend_plan(plan, cloud, count, "gss", seed, sampler=sampler)
        return plan

    def prepare(self, cloud: PointCloud, seed: int = 0, plan: SamplingPlan | None = None) -> Batch:
        if plan is None:
            plan = self.plan(cloud, seed)
        if len(plan.stages) != self.config.stages - 1:
            raise ConfigError(f"plan has {len(plan.stages)} reductions, network needs {self.config.stages - 1}")
        return Batch(cloud, plan, prepare_stages(cloud, plan, self.config))

    # -- forward --------------------------------------------------------------

    def forward(self, batch: Batch, coords: ad.Tensor | None = None, traces: list | None = None) -> Forward:
        cfg = self.config
        cloud = batch.cloud
        if len(batch.stages) != cfg.stages:
            raise ConfigError(f"batch has {len(batch.stages)} stages, network needs {cfg.stages}")
        if coords is None:
            coords = ad.Tensor(cloud.coords)
        raw = cloud.features
        if raw.shape[1] != cfg.in_features:
            raise ConfigError(f"cloud has {raw.shape[1]} feature channels, network expects {cfg.in_features}")
        x = ad.relu(self.stem(ad.Tensor(np.concatenate([np.ones((len(cloud), 1)), raw], axis=1))))
        stage_coords = coords
        raw_stage = raw
        feats = []
        for s, st in enumerate(batch.stages):
            if s > 0:
                if st.method == "gss":
                    p = ad.concat([stage_coords, ad.Tensor(raw_stage)])
                    soft, _ = gumbel_soft_select(self.ensure_sampler(len(st.indices)), p)
                    sel = soft if cfg.gss_transfer == "soft" else straight_through(soft, st.indices)
                    x = ad.matmul(sel, x)
                else:
                    x = ad.gather_rows(x, st.indices)
                stage_coords = ad.gather_rows(stage_coords, st.indices)
                raw_stage = raw_stage[st.indices]
            for block in self.blocks[s]:
                x = rlb_forward(block, x, stage_coords, st.neighbors, traces)
            feats.append(x)
        m_in = feats[-1]
        m_out = global_attend(m_in, self.attention) if cfg.use_global else m_in
        feats[-1] = m_out
        stage_logits = [head(f) for head, f in zip(self.heads, feats)]
        up_logits, fused = decode_and_fuse(stage_logits, batch, cfg)
        presence = classify_scene(m_out, self.cls_head)
        return Forward(up_logits, fused, presence, m_in, m_out)

    def loss(self, batch: Batch, coords: ad.Tensor | None = None) -> tuple[ad.Tensor, LossReport, Forward]:
        cfg = self.config
        traces: list = []
        out = self.forward(batch, coords, traces)
        labels = batch.cloud.labels
        if labels is None:
            raise ValueError("loss needs a labelled cloud")
        l1 = seg_loss(out.stage_logits, out.fused_logits, labels, cfg.alpha, cfg.beta)
        if cfg.use_context:
            l2 = context_loss(out.presence_logits, presence_targets(labels, cfg.num_classes))
        else:
            l2 = ad.Tensor(0.0)
        fit = rep = contain = ad.Tensor(0.0)
        if cfg.use_gcm and not cfg.freeze_kernels:
            for conv, trace in traces:
                fit = ad.add(fit, kernel_fit_loss(conv.kernel, trace.offsets, conv.k))
                rep = ad.add(rep, kernel_repulsive_loss(conv.kernel))
                contain = ad.add(contain, kernel_contain_loss(conv.kernel))
        l_ker = ad.add(ad.add(fit, rep), contain)
        total = ad.add(ad.add(l1, l2), l_ker)
        report = LossReport.combine(fit.item(), rep.item(), contain.item(), l1.item(), l2.item())
        return total, report, out

    def predict(self, batch: Batch) -> np.ndarray:
        return self.forward(batch).fused_logits.data.argmax(axis=1)


@dataclass
class Forward:
    stage_logits: list[ad.Tensor]  # per stage, upsampled to full resolution
    fused_logits: ad.Tensor
    presence_logits: ad.Tensor
    m_in: ad.Tensor
    m_out: ad.Tensor


def upsample(values: ad.Tensor, stage: int, batch: Batch, mode: str = "nearest") -> ad.Tensor:
    """Carry stage-``stage`` rows back to full resolution."""
    if stage == 0:
        return values
    if mode == "nearest":
        return ad.gather_rows(values, batch.plan.upsample_to_full(stage - 1))
    out = values
    for s in range(stage, 0, -1):
        st = batch.stages[s]
        ids, w = st.interp_ids, st.interp_w
        k = ids.shape[1]
        picked = ad.gather_rows(out, ids.reshape(-1))
        out = ad.segment_sum(ad.mul(picked, ad.Tensor(w.reshape(-1, 1))), k)
    return out


def decode_and_fuse(stage_logits: list[ad.Tensor], batch: Batch, cfg: NetworkConfig):
    """Upsample every stage's logits to full resolution and fuse them with weights alpha."""
    ups = [upsample(l, s, batch, cfg.upsample) for s, l in enumerate(stage_logits)]
    fused = None
    for a, u in zip(cfg.alpha, ups):
        term = ad.scale(u, a)
        fused = term if fused is None else ad.add(fused, term)
    return ups, fused


def classify_scene(m_out: ad.Tensor, head: Linear) -> ad.Tensor:
    """Average the bottleneck rows, then one presence logit per class."""
    return head(ad.mean(m_out, axis=0))


def export_attention_row(net: FGNet, batch: Batch, query: int) -> np.ndarray:
    out = net.forward(batch)
    if not 0 <= query < out.m_in.rows:
        raise IndexError(f"query {query} outside [0, {out.m_in.rows})")
    return attention_scores(ad.Tensor(out.m_in.data), net.attention).data[query]
