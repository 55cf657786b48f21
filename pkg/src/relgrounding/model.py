"""The two-stage grounding network and its training objective."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
from torch import nn

from relgrounding.batch import Batch, collate
from relgrounding.coarse_matcher import (
    MatchHead,
    RefinedSet,
    ScoreTable,
    fuse_and_attend,
    gather_k,
    restrict_attention,
    select_topk,
)
from relgrounding.corpus import GroundingInstance
from relgrounding.fine_matcher import FineTable, best_candidate, fine_score, fuse_scores
from relgrounding.geometry import Box, apply_offset_t
from relgrounding.losses import (
    LossBundle,
    PhraseDecoder,
    RelationClassifier,
    build_regression_targets,
    ranking_loss,
    reconstruction_loss,
    regression_loss,
    relation_loss,
    total_loss,
)
from relgrounding.object_graph import GraphOutput, MessageNet, init_nodes, message_pass, redistribute
from relgrounding.text_encoder import SemanticEmbedding, TextEncoder

SPATIAL_DIM = 5
# spatial inputs are centered to [-1, 1] and scaled to sit on the feature scale
SPATIAL_SCALE = 4.0


@dataclass
class ModelConfig:
    vocab_size: int
    feature_dim: int
    num_semantic_ids: int
    num_relations: int
    dim: int = 32
    word_dim: int = 32
    hidden: int = 32
    semantic_dim: int = 16
    top_k: int = 5
    tau: float = 0.6
    margin: float = 0.1
    attention_scale: float = 1.0
    use_semantic_fusion: bool = True
    use_topk: bool = True
    use_regression: bool = True
    use_graph_and_relation: bool = True
    use_rank: bool = True
    use_rec: bool = True


@dataclass
class Plan:
    """Discrete choices of one forward pass (selection and self-taught targets)."""

    topk: torch.Tensor
    refined_boxes: torch.Tensor
    coarse_targets: tuple[torch.Tensor, torch.Tensor] | None = None
    fine_targets: tuple[torch.Tensor, torch.Tensor] | None = None


@dataclass
class Outputs:
    H: torch.Tensor
    x_q: torch.Tensor
    x_o: torch.Tensor
    coarse: ScoreTable
    coarse_offsets: torch.Tensor
    refined: RefinedSet
    z_coarse: torch.Tensor
    graph: GraphOutput
    x_ctx: torch.Tensor
    fine: FineTable
    fused: torch.Tensor
    z_fine: torch.Tensor
    sentence: torch.Tensor
    plan: Plan


def masked_mean(x: torch.Tensor, mask: torch.Tensor, dim: int) -> torch.Tensor:
    w = mask.to(x.dtype).unsqueeze(-1)
    return (x * w).sum(dim) / w.sum(dim).clamp(min=1)


def spatial_features(boxes: torch.Tensor, image_size: torch.Tensor) -> torch.Tensor:
    """Centered corners and relative area: (B, M, 4) -> (B, M, 5)."""
    wh = image_size.unsqueeze(1).repeat(1, 1, 2)
    norm = boxes / wh
    area = (norm[..., 2] - norm[..., 0]) * (norm[..., 3] - norm[..., 1])
    return SPATIAL_SCALE * (2.0 * torch.cat([norm, area.unsqueeze(-1)], dim=-1) - 1.0)


class GroundingNet(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = TextEncoder(cfg.vocab_size, cfg.word_dim, cfg.dim)
        self.visual = nn.Linear(cfg.feature_dim + SPATIAL_DIM, cfg.dim)
        self.semantic = SemanticEmbedding(cfg.num_semantic_ids, cfg.semantic_dim)
        self.coarse_head = MatchHead(cfg.dim, cfg.hidden)
        self.fine_head = MatchHead(cfg.dim, cfg.hidden)
        self.message = MessageNet(cfg.dim, cfg.hidden)
        self.decoder = PhraseDecoder(cfg.vocab_size, cfg.word_dim, cfg.dim, cfg.hidden)
        self.relation = RelationClassifier(cfg.dim, cfg.hidden, cfg.num_relations)
        self.reset_parameters()

    def reset_parameters(self) -> None:
        """Fan-in uniform linear weights, orthogonal recurrent matrices, zero biases."""
        for name, p in self.named_parameters():
            if name.endswith("bias") or "bias_" in name:
                nn.init.zeros_(p)
            elif "weight_hh" in name:
                for gate in p.data.chunk(4, dim=0):
                    nn.init.orthogonal_(gate)
            elif "weight_ih" in name:
                bound = 1.0 / p.shape[1] ** 0.5
                nn.init.uniform_(p, -bound, bound)
        for module in self.modules():
            if isinstance(module, nn.Linear):
                bound = 1.0 / module.in_features**0.5
                nn.init.uniform_(module.weight, -bound, bound)
            elif isinstance(module, nn.Embedding):
                nn.init.normal_(module.weight, 0.0, 1.0)

    @property
    def top_k(self) -> int:
        return self.cfg.top_k

    def forward(self, batch: Batch, plan: Plan | None = None) -> Outputs:
        cfg = self.cfg
        M = batch.boxes.shape[1]
        K = min(cfg.top_k, M) if cfg.use_topk else M
        phrase_mask = batch.phrase_mask

        H = self.encoder(batch.tokens)
        x_q = batch.pooling @ H
        sentence = masked_mean(H, batch.token_mask, dim=1)
        x_o = self.visual(torch.cat([batch.features, spatial_features(batch.boxes, batch.image_size)], -1))

        raw, coarse_offsets = self.coarse_head(x_q.unsqueeze(2), x_o.unsqueeze(1))
        if cfg.use_semantic_fusion:
            semantic = self.semantic(batch.concepts.unsqueeze(2), batch.categories.unsqueeze(1))
        else:
            semantic = torch.ones_like(raw)
        coarse = fuse_and_attend(raw, semantic, cfg.attention_scale)
        z_coarse = coarse.attention @ x_o

        bounds = batch.bounds[:, None, None, :]
        if plan is None:
            refined = select_topk(
                coarse, batch.boxes, coarse_offsets if cfg.use_regression else None, K, bounds, cfg.attention_scale
            )
            plan = Plan(refined.indices, refined.boxes)
        else:
            refined = RefinedSet(plan.topk, plan.refined_boxes, restrict_attention(coarse.fused, plan.topk, cfg.attention_scale))

        x_k = gather_k(x_o.unsqueeze(1).expand(-1, raw.shape[1], -1, -1), refined.indices)
        z = init_nodes(refined.attention, x_k)
        graph = message_pass(z, batch.adjacency, self.message if cfg.use_graph_and_relation else None)
        x_ctx = redistribute(graph.z, refined.attention, x_k)

        fine = fine_score(
            self.fine_head, x_q, x_ctx, torch.gather(semantic, -1, refined.indices), cfg.attention_scale
        )
        fused = fuse_scores(torch.gather(coarse.fused, -1, refined.indices), fine.score)
        z_fine = (fine.attention.unsqueeze(-1) * x_ctx).sum(-2)

        if cfg.use_regression and plan.coarse_targets is None:
            per_phrase = batch.boxes.unsqueeze(1).expand(*coarse.fused.shape, 4)
            plan.coarse_targets = build_regression_targets(per_phrase, coarse.fused, coarse_offsets, cfg.tau)
            plan.fine_targets = build_regression_targets(refined.boxes, fused, fine.offsets, cfg.tau)

        return Outputs(
            H, x_q, x_o, coarse, coarse_offsets, refined, z_coarse, graph, x_ctx,
            fine, fused, z_fine, sentence, plan,
        )

    def losses(
        self,
        batch: Batch,
        out: Outputs,
        weights: tuple[float, float, float],
        regression_active: bool = True,
    ) -> LossBundle:
        cfg = self.cfg
        zero = out.fused.sum() * 0.0
        mask = batch.phrase_mask
        rec = zero
        if cfg.use_rec:
            rec = reconstruction_loss(
                self.decoder, out.z_coarse, out.z_fine, batch.phrase_tokens, batch.phrase_token_mask, mask
            )
        reg = zero
        if cfg.use_regression and regression_active:
            reg = regression_loss(
                out.coarse_offsets, out.fine.offsets, out.plan.coarse_targets, out.plan.fine_targets, mask
            )
        rel = zero
        if cfg.use_graph_and_relation:
            rel = relation_loss(self.relation, out.z_fine, batch.rel_pairs, batch.rel_labels)
        rank = zero
        if cfg.use_rank:
            rank = ranking_loss(
                masked_mean(out.z_coarse, mask, 1), masked_mean(out.z_fine, mask, 1), out.sentence, cfg.margin
            )
        l1, l2, l3 = weights
        if not cfg.use_graph_and_relation:
            l2 = 0.0
        if not (cfg.use_regression and regression_active):
            l1 = 0.0
        return total_loss(rec, reg, rel, rank, (l1, l2, l3))

    @torch.no_grad()
    def predict(self, batch: Batch) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Per phrase: final box (B, N, 4), fused score (B, N), chosen proposal index (B, N)."""
        out = self.forward(batch)
        best = best_candidate(out.fused)
        pick = best.unsqueeze(-1)
        boxes = gather_k(out.refined.boxes, pick).squeeze(-2)
        if self.cfg.use_regression:
            delta = gather_k(out.fine.offsets, pick).squeeze(-2)
            boxes = apply_offset_t(boxes, delta, batch.bounds[:, None, :])
        score = torch.gather(out.fused, -1, pick).squeeze(-1)
        proposal = torch.gather(out.refined.indices, -1, pick).squeeze(-1)
        return boxes, score, proposal


@dataclass
class Prediction:
    image_id: str
    phrase: int
    box: Box
    score: float


def infer(
    instances: list[GroundingInstance], model: GroundingNet, batch_size: int = 64
) -> list[Prediction]:
    """Ground every phrase of every instance; gt boxes are never consulted."""
    dtype = next(model.parameters()).dtype
    preds: list[Prediction] = []
    was_training = model.training
    model.eval()
    for start in range(0, len(instances), batch_size):
        chunk = [inst.without_gt() for inst in instances[start : start + batch_size]]
        batch = collate(chunk, dtype)
        boxes, scores, _ = model.predict(batch)
        for b, inst in enumerate(chunk):
            for i in range(len(inst.caption.phrases)):
                preds.append(
                    Prediction(inst.image.image_id, i, Box(*map(float, boxes[b, i])), float(scores[b, i]))
                )
    model.train(was_training)
    return preds


def model_config_dict(cfg: ModelConfig) -> dict:
    return asdict(cfg)
