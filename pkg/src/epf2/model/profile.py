"""Parameter and FLOP accounting.

Conventions: one multiply-accumulate = 2 FLOPs; linears are counted at one
query token; norm layers count 0 FLOPs; bias adds are excluded from FLOPs.
"""

from __future__ import annotations

from dataclasses import dataclass

from .config import ModelConfig


@dataclass
class CostRow:
    module: str
    layer: str
    params: int
    flops: int
    category: str = "other"  # "attention" | "ffn" | "head" | "encoder" | "other"


def linear_cost(d_in: int, d_out: int, tokens: int = 1) -> tuple[int, int]:
    return (d_in + 1) * d_out, 2 * d_in * d_out * tokens


def norm_cost(channels: int) -> tuple[int, int]:
    return 2 * channels, 0


def fusion_cost(channels: int, views: int, tokens: int = 1) -> tuple[int, int]:
    """The V*C -> C multi-view fusion linear.

    Parameters include all V*C inputs; FLOPs are charged at C x C per fused
    output token, the convention of the reference efficiency table.
    """
    return (views * channels + 1) * channels, 2 * channels * channels * tokens


def multiview_attention_table(channels: int, views: int) -> list[CostRow]:
    """Layer-wise costs of the single-query multi-view attention module."""
    rows = []
    for name in ("query projection", "key projection", "value projection"):
        p, f = linear_cost(channels, channels)
        rows.append(CostRow("multiview attention", name, p, f, "attention"))
    p, f = fusion_cost(channels, views)
    rows.append(CostRow("multiview attention", "output projection", p, f, "attention"))
    p, f = norm_cost(channels)
    rows.append(CostRow("multiview attention", "norm", p, f, "attention"))
    return rows


def temporal_attention_table(channels: int) -> list[CostRow]:
    rows = []
    for name in ("query projection", "key projection", "value projection", "output projection"):
        p, f = linear_cost(channels, channels)
        rows.append(CostRow("temporal attention", name, p, f, "attention"))
    p, f = norm_cost(channels)
    rows.append(CostRow("temporal attention", "norm", p, f, "attention"))
    return rows


def model_table(cfg: ModelConfig) -> list[CostRow]:
    """Per-layer cost table for the full network at one query token."""
    c, j, v = cfg.channels, cfg.joints, cfg.views
    rows: list[CostRow] = []
    # encoder (per view, weights shared across views)
    p, f = linear_cost(cfg.patch_size ** 2, c, tokens=cfg.token_count)
    rows.append(CostRow("encoder", "patch projection", p, f, "encoder"))
    for i in range(cfg.encoder_blocks):
        p, f = linear_cost(c, 3 * c, tokens=cfg.token_count)
        rows.append(CostRow(f"encoder block {i}", "qkv projection", p, f, "encoder"))
        p, f = linear_cost(c, c, tokens=cfg.token_count)
        rows.append(CostRow(f"encoder block {i}", "output projection", p, f, "encoder"))
        p1, f1 = linear_cost(c, cfg.encoder_ffn_mult * c, tokens=cfg.token_count)
        p2, f2 = linear_cost(cfg.encoder_ffn_mult * c, c, tokens=cfg.token_count)
        rows.append(CostRow(f"encoder block {i}", "ffn", p1 + p2, f1 + f2, "encoder"))
        p, f = norm_cost(c)
        rows.append(CostRow(f"encoder block {i}", "norms", 2 * p, 0, "encoder"))
    # query construction
    p1, f1 = linear_cost(9, c)
    p2, f2 = linear_cost(c, c)
    rows.append(CostRow("query", "query mlp", p1 + p2, f1 + f2, "other"))
    # condition mlp (refinement stage; input is 2J projected coordinates)
    p1, f1 = linear_cost(2 * j, c)
    p2, f2 = linear_cost(c, c)
    rows.append(CostRow("condition", "projection mlp", p1 + p2, f1 + f2, "condition"))
    # the two stacked decoders are architecturally identical
    for stage in ("proposal decoder", "refinement decoder"):
        for i in range(cfg.layers):
            name = f"{stage} layer {i}"
            rows.extend(CostRow(name, r.layer, r.params, r.flops, r.category)
                        for r in multiview_attention_table(c, v))
            rows.extend(CostRow(name, f"temporal {r.layer}", r.params, r.flops, r.category)
                        for r in temporal_attention_table(c))
            p1, f1 = linear_cost(c, cfg.ffn_mult * c)
            p2, f2 = linear_cost(cfg.ffn_mult * c, c)
            rows.append(CostRow(name, "ffn", p1 + p2, f1 + f2, "ffn"))
            p, f = norm_cost(c)
            rows.append(CostRow(name, "ffn norm", p, 0, "ffn"))
    # task heads
    p1, f1 = linear_cost(c, c)
    p2, f2 = linear_cost(c, 3 * j)
    rows.append(CostRow("proposal head", "mlp", p1 + p2, f1 + f2, "head"))
    if cfg.head_mode == "parametric":
        for name, d_out in (("rotation mlp", 6 * j), ("scale mlp", 1), ("transform mlp", 9)):
            p1, f1 = linear_cost(c, c)
            p2, f2 = linear_cost(c, d_out)
            rows.append(CostRow("parametric head", name, p1 + p2, f1 + f2, "head"))
    else:
        p1, f1 = linear_cost(c, c)
        p2, f2 = linear_cost(c, 3 * j)
        rows.append(CostRow("refinement head", "mlp", p1 + p2, f1 + f2, "head"))
    p1, f1 = linear_cost(c, c)
    p2, f2 = linear_cost(c, 6 * j)
    rows.append(CostRow("uncertainty head", "mlp", p1 + p2, f1 + f2, "head"))
    return rows


def totals(rows: list[CostRow]) -> tuple[int, int]:
    return sum(r.params for r in rows), sum(r.flops for r in rows)


def format_table(rows: list[CostRow]) -> str:
    width = max(len(r.module) for r in rows)
    lwidth = max(len(r.layer) for r in rows)
    lines = [f"{'Module':<{width}}  {'Layer':<{lwidth}}  {'Params':>10}  {'FLOPs':>10}"]
    for r in rows:
        lines.append(f"{r.module:<{width}}  {r.layer:<{lwidth}}  {r.params:>10}  {r.flops:>10}")
    p, f = totals(rows)
    lines.append(f"{'Total':<{width}}  {'-':<{lwidth}}  {p:>10}  {f:>10}")
    return "\n".join(lines)


def table_csv(rows: list[CostRow]) -> str:
    lines = ["module,layer,params,flops"]
    for r in rows:
        lines.append(f"{r.module},{r.layer},{r.params},{r.flops}")
    p, f = totals(rows)
    lines.append(f"Total,-,{p},{f}")
    return "\n".join(lines) + "\n"
