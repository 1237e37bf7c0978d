"""The end-to-end network: encoder, per-level BEV heads, query generation, decoder."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .config import RunConfig
from .decoder import MaskDecoder, build_mask_embedding, positional_encoding
from .encoder import FeatureEncoder, SceneGeometry, prepare_geometry
from .inference import PanopticLabeling, assemble, fuse_masks
from .queries import (
    BevEmbedding,
    BevMaps,
    CenterHead,
    QuerySet,
    StuffHead,
    fuse_stuff_proposals,
    fuse_thing_proposals,
    select_thing_proposals,
)


@dataclass
class ForwardOutput:
    maps: list[BevMaps]
    query_set: QuerySet
    mask_logits: list[torch.Tensor]  # one (n_queries, n_points) tensor per decoder block
    semantic_logits: torch.Tensor
    point_feats: list[torch.Tensor]

    def masks(self, block: int = -1) -> np.ndarray:
        return torch.sigmoid(self.mask_logits[block]).detach().double().numpy()


class PanopticModel(nn.Module):
    def __init__(self, config: RunConfig):
        super().__init__()
        self.config = config
        tax = config.taxonomy
        self.n_things, self.n_stuff = tax.n_things, tax.n_stuff
        spec = config.grid_spec
        self.spec = spec
        with torch.random.fork_rng():
            torch.manual_seed(config.seed)
            self._build(config, spec, tax)

    def _build(self, config, spec, tax):
        in_dim = 8 if config.use_range_feature else 7
        e = config.embed_dim
        self.encoder = FeatureEncoder(in_dim, config.base_channels, e, spec.n_levels, seed=config.seed)
        self.bev = nn.ModuleList(
            BevEmbedding(e, spec.level_dims(i)[2], e, config.bev_voxel_channels) for i in range(spec.n_levels)
        )
        self.center_head = CenterHead(e, self.n_things)
        self.stuff_head = StuffHead(e, self.n_stuff)
        self.decoder = MaskDecoder(e, config.n_blocks, config.n_heads, config.ffn_mult, config.attn_mask_threshold)
        self.semantic_head = nn.Sequential(nn.Linear(e, e), nn.ReLU(), nn.Linear(e, tax.n_classes))

    @property
    def dtype(self):
        return self.semantic_head[0].weight.dtype

    def prepare(self, cloud) -> SceneGeometry:
        return prepare_geometry(cloud, self.spec, self.config.knn_k, self.config.use_range_feature)

    def bev_maps(self, geom: SceneGeometry, voxel_feats) -> list[BevMaps]:
        maps = []
        for level, (grid, feats) in enumerate(zip(geom.grids, voxel_feats)):
            emb = self.bev[level](grid, feats)
            st_map, st_q = self.stuff_head(emb)
            maps.append(BevMaps(level, emb, self.center_head(emb), st_map, st_q))
        return maps

    def generate_queries(self, maps, training: bool, theta_th=None) -> QuerySet:
        cfg = self.config
        min_score = 0.0 if training else cfg.thing_score_thresh
        proposals = []
        for m in maps:
            proposals += select_thing_proposals(m, cfg.n_queries, self.spec, cfg.peak_filter, min_score)
        things = fuse_thing_proposals(proposals, cfg.theta_th if theta_th is None else theta_th, cfg.window_m)
        stuff = fuse_stuff_proposals(
            [m.stuff_queries for m in maps],
            [m.stuff_map for m in maps],
            cfg.theta_st,
            self.n_things,
            require_existence=not training,
        )
        return QuerySet(things, stuff)

    def query_embeddings(self, query_set: QuerySet) -> torch.Tensor:
        q = query_set.embeddings()
        if self.config.query_pos_encoding and query_set.things:
            xy = torch.tensor([p.xy + (0.0,) for p in query_set.things], dtype=q.dtype)
            pe = positional_encoding(xy, q.shape[1], self.spec.range_xy, self.config.pe_min_wavelength, axes=(0, 1))
            q = q + torch.cat([pe, q.new_zeros(len(query_set.stuff), q.shape[1])])
        return q

    def forward(self, geom: SceneGeometry, training: bool = False, theta_th=None, masked: bool = True):
        voxel_feats, point_feats = self.encoder(geom)
        maps = self.bev_maps(geom, voxel_feats)
        query_set = self.generate_queries(maps, training, theta_th)
        positions = torch.as_tensor(geom.cloud.positions, dtype=self.dtype)
        pe = positional_encoding(positions, self.config.embed_dim, self.spec.range_xy, self.config.pe_min_wavelength)
        mask_embedding = build_mask_embedding(point_feats[-1], pe)
        if len(query_set):
            feats = [point_feats[lv] for lv in self.config.decoder_levels]
            logits, _ = self.decoder(self.query_embeddings(query_set), feats, mask_embedding, masked)
        else:
            logits = []
        semantic = self.semantic_head(point_feats[-1])
        return ForwardOutput(maps, query_set, logits, semantic, point_feats)

    @torch.no_grad()
    def predict(self, cloud, geom=None, block: int = -1, theta_th=None, fuse: bool = True):
        """Panoptic labels for one cloud; returns ``(labeling, forward output)``."""
        geom = geom or self.prepare(cloud)
        out = self(geom, training=False, theta_th=theta_th)
        return self.assemble(out, block, fuse), out

    def assemble(self, out: ForwardOutput, block: int = -1, fuse: bool = True) -> PanopticLabeling:
        sem = out.semantic_logits.detach().double().numpy()
        if not len(out.query_set):
            return assemble(np.zeros((0, len(sem))), out.query_set, sem, self.n_things)
        masks, qs = out.masks(block), out.query_set
        if fuse:
            masks, qs, _ = fuse_masks(masks, qs, self.config.iou_thresh)
        return assemble(masks, qs, sem, self.n_things)
