"""Model assembly and the two forward paths.

Training encodes one image K times, once per count hypothesis, with
quantity-conditioned prompts and the numeric text template. Inference
encodes once with the raw prompts and the category-only template; the
quantity embedder and category projector are never invoked there, which
the purity test asserts through their call counters.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch
from torch import nn

from .backbone import DenseVisual, TextTransformer, VisionTransformer
from .config import TrainConfig
from .decoder import CostAggregationDecoder
from .losses import (LossBreakdown, cosine_score, dec_quantity_loss,
                     density_loss, enc_quantity_loss, total_loss)
from .prompting import (CategoryProjector, CouplingStack, PromptBank,
                        condition_prompts, couple_prompts)
from .quantity import HypothesisSet, QuantityEmbedder, make_hypotheses
from .tokenizer import VocabTokenizer, inference_text, training_text


@dataclass
class EncodedPair:
    """One hypothesis' encodings. text_full is None on the inference path."""
    text_full: Optional[torch.Tensor]
    text_category: torch.Tensor
    dense: DenseVisual
    hypothesis_index: int


class CountingModel(nn.Module):
    def __init__(self, cfg: TrainConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        mc = cfg.model
        self.tokenizer = VocabTokenizer(mc.categories, mc.max_count,
                                        mc.text.max_seq_len)
        self.text_encoder = TextTransformer(mc.text, self.tokenizer.vocab_size,
                                            self.tokenizer.pad_id)
        self.vision_encoder = VisionTransformer(mc.vision)
        self.prompt_bank = PromptBank(cfg.prompt_depth, cfg.prompt_length,
                                      mc.text.width)
        self.coupling = CouplingStack(cfg.prompt_depth, mc.text.width,
                                      mc.vision.width)
        self.category_proj = CategoryProjector(mc.text.width)
        self.quantity_embedder = QuantityEmbedder(mc.max_count, mc.text.width)
        self.decoder = CostAggregationDecoder(mc.decoder, mc.text.width,
                                              mc.vision.width)
        if cfg.freeze_backbone:
            for p in self.text_encoder.parameters():
                p.requires_grad_(False)
            for p in self.vision_encoder.parameters():
                p.requires_grad_(False)

    # ------------------------------------------------------------------
    # internals

    def _param_dtype(self) -> torch.dtype:
        return self.text_encoder.token_embed.weight.dtype

    def _tokens(self, texts) -> torch.Tensor:
        ids = [self.tokenizer.tokenize(t).ids for t in texts]
        return torch.tensor(ids, dtype=torch.long)

    def _encode_conditioned(self, images: torch.Tensor, tokens: torch.Tensor,
                            quantities: torch.Tensor):
        """Batched training-path encode. images: (N, 3, H, W); tokens: (N, S);
        quantities: (N,) ints. Returns (text_full, text_cat, dense)."""
        eps = self.quantity_embedder(quantities)
        grids = condition_prompts(self.prompt_bank.grids, eps)
        text_full = self.text_encoder(tokens, grids)
        text_cat = self.category_proj(text_full)
        vision_grids = couple_prompts(self.coupling, grids)
        dense = self.vision_encoder(images, vision_grids)
        return text_full, text_cat, dense

    # ------------------------------------------------------------------
    # public paths

    def forward_hypothesis(self, image: torch.Tensor, category: str,
                           quantity: int, hypothesis_index: int = 0) -> EncodedPair:
        pairs = self.forward_all_hypotheses(image, category, [quantity])
        pair = pairs[0]
        pair.hypothesis_index = hypothesis_index
        return pair

    def forward_all_hypotheses(self, image: torch.Tensor, category: str,
                               quantities) -> list:
        """Encode one image under each hypothesis count (batched over K)."""
        if image.dim() != 3:
            raise ValueError("expected a single (3, H, W) image")
        quantities = list(quantities)
        n = len(quantities)
        texts = [training_text(q, category) for q in quantities]
        tokens = self._tokens(texts)
        images = image.unsqueeze(0).expand(n, -1, -1, -1)
        q = torch.tensor(quantities, dtype=torch.long)
        text_full, text_cat, dense = self._encode_conditioned(images, tokens, q)
        return [
            EncodedPair(
                text_full=text_full[i], text_category=text_cat[i],
                dense=DenseVisual(V=dense.V[i], v_g=dense.v_g[i],
                                  stage_features=tuple(s[i] for s in dense.stage_features)),
                hypothesis_index=i)
            for i in range(n)
        ]

    def forward_inference(self, images: torch.Tensor, category: str) -> EncodedPair:
        """Category-only path: raw prompts, no quantity conditioning, and the
        text encoding is used directly without the category projector."""
        text = inference_text(category)
        tok = self.tokenizer.tokenize(text)
        for i in tok.ids:
            if self.tokenizer.is_count_token(i):
                raise ValueError(f"inference text contains a count token: {text!r}")
        squeeze = images.dim() == 3
        if squeeze:
            images = images.unsqueeze(0)
        n = images.shape[0]
        tokens = torch.tensor([tok.ids] * n, dtype=torch.long)
        grids = [g for g in self.prompt_bank.grids]
        text_cat = self.text_encoder(tokens, grids)
        vision_grids = couple_prompts(self.coupling, grids)
        dense = self.vision_encoder(images, vision_grids)
        if squeeze:
            text_cat = text_cat[0]
            dense = DenseVisual(V=dense.V[0], v_g=dense.v_g[0],
                                stage_features=tuple(s[0] for s in dense.stage_features))
        return EncodedPair(text_full=None, text_category=text_cat, dense=dense,
                           hypothesis_index=0)

    def predict_density(self, images: torch.Tensor, category: str) -> torch.Tensor:
        pair = self.forward_inference(images, category)
        return self.decoder(pair.dense, pair.text_category)

    # ------------------------------------------------------------------
    # losses

    def hypothesis_losses(self, image: torch.Tensor, category: str, n_gt: int,
                          density_gt: torch.Tensor,
                          hypotheses: Optional[HypothesisSet] = None) -> LossBreakdown:
        """Full training loss for one image."""
        cfg = self.cfg
        if hypotheses is None:
            hypotheses = make_hypotheses(n_gt, cfg.k)
        pairs = self.forward_all_hypotheses(image, category, hypotheses.values)
        vg = torch.stack([p.dense.v_g for p in pairs])
        tf = torch.stack([p.text_full for p in pairs])
        tc = torch.stack([p.text_category for p in pairs])
        V = torch.stack([p.dense.V for p in pairs])
        skips = tuple(torch.stack([p.dense.stage_features[s] for p in pairs])
                      for s in range(len(pairs[0].dense.stage_features)))
        densities = self.decoder(DenseVisual(V=V, v_g=vg, stage_features=skips), tc)
        counts = self.decoder.count(densities)

        if cfg.shared_vg:
            # score against a single unconditioned global token instead of
            # the per-hypothesis ones
            with_raw = self.forward_inference(image, category)
            vg_scores = with_raw.dense.v_g.unsqueeze(0).expand_as(vg)
        else:
            vg_scores = vg
        # the decoder's similarity bridge reconciles the text and vision
        # widths here as well; identity when the widths already match
        alpha = cosine_score(vg_scores, self.decoder.bridge(tf))
        enc = enc_quantity_loss(alpha, hypotheses)
        dec = dec_quantity_loss(counts, hypotheses, cfg.beta)
        dens = density_loss(densities[0], density_gt.to(densities.dtype))
        return total_loss(dens, enc, dec, cfg.lambda1, cfg.lambda2)

    def plain_density_loss(self, image: torch.Tensor, category: str,
                           density_gt: torch.Tensor) -> LossBreakdown:
        """Degenerate regime (K=1 with zero loss weights): plain density
        regression through the inference path; quantity modules stay idle."""
        pair = self.forward_inference(image, category)
        density = self.decoder(pair.dense, pair.text_category)
        dens = density_loss(density, density_gt.to(density.dtype))
        zero = dens * 0.0
        return total_loss(dens, zero, zero, self.cfg.lambda1, self.cfg.lambda2)

    def training_loss(self, image: torch.Tensor, category: str, n_gt: int,
                      density_gt: torch.Tensor) -> LossBreakdown:
        cfg = self.cfg
        if cfg.k == 1 and cfg.lambda1 == 0.0 and cfg.lambda2 == 0.0:
            return self.plain_density_loss(image, category, density_gt)
        return self.hypothesis_losses(image, category, n_gt, density_gt)

    # ------------------------------------------------------------------

    def reset_call_counts(self):
        self.quantity_embedder.call_count = 0
        self.category_proj.call_count = 0

    def parameter_groups(self) -> dict:
        """Trainable parameter groups keyed by stable names."""
        groups = {
            "prompts": list(self.prompt_bank.parameters()),
            "coupling": list(self.coupling.parameters()),
            "category_projector": list(self.category_proj.parameters()),
            "quantity_embedder": list(self.quantity_embedder.parameters()),
            "decoder": [p for n, p in self.decoder.named_parameters()
                        if not n.startswith("head.")],
            "head": list(self.decoder.head.parameters()),
        }
        if not self.cfg.freeze_backbone:
            groups["text_backbone"] = list(self.text_encoder.parameters())
            groups["vision_backbone"] = list(self.vision_encoder.parameters())
        return groups


def build_model(cfg: TrainConfig) -> CountingModel:
    model = CountingModel(cfg)
    if cfg.precision == "double":
        model.double()
    return model
