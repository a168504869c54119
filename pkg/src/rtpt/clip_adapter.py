"""Pretrained CLIP backends ("clip-rn50", "clip-vit-b16") for full-scale runs.

``open_clip`` is imported lazily so the rest of the package works without it.
Weights come from ``RTPT_CHECKPOINT_ROOT`` (or an explicit ``checkpoint``)
when set, otherwise from the open_clip cache.

Learnable context tokens are spliced into the token-embedding sequence in
place of the placeholder words, the usual way of prompt tuning CLIP.
"""

from __future__ import annotations

import os
from typing import Sequence

import torch

from .errors import ConfigurationError
from .model import EncoderBackend, checkpoint_root, register_backend

CLIP_MEAN = (0.48145466, 0.4578275, 0.40821073)
CLIP_STD = (0.26862954, 0.26130258, 0.27577711)

ARCHS = {
    "clip-rn50": ("RN50", "RN50.pt"),
    "clip-vit-b16": ("ViT-B-16", "ViT-B-16.pt"),
}


def _open_clip():
    try:
        import open_clip
    except ImportError:
        raise ConfigurationError(
            "the CLIP backends need the optional 'open_clip_torch' package "
            "(pip install 'artifact[clip]')"
        ) from None
    return open_clip


class ClipBackend(EncoderBackend):
    dtype = torch.float32

    def __init__(self, name: str, checkpoint=None, device: str = "cpu"):
        open_clip = _open_clip()
        arch, filename = ARCHS[name]
        root = checkpoint_root(checkpoint)
        pretrained = "openai"
        if root is not None:
            path = root if os.path.isfile(root) else os.path.join(root, filename)
            if not os.path.exists(path):
                raise ConfigurationError(f"checkpoint {path} not found for backend {name}")
            pretrained = path
        model, _, _ = open_clip.create_model_and_transforms(arch, pretrained=pretrained, device=device)
        model.eval()
        for p in model.parameters():
            p.requires_grad_(False)
        self.name = name
        self.model = model
        self.tokenizer = open_clip.get_tokenizer(arch)
        self.device = torch.device(device)
        size = model.visual.image_size
        size = size[0] if isinstance(size, (tuple, list)) else size
        self.input_shape = (3, size, size)
        self.text_dim = model.token_embedding.weight.shape[1]
        self.image_dim = model.text_projection.shape[1]
        self._mean = torch.tensor(CLIP_MEAN, device=self.device).view(1, 3, 1, 1)
        self._std = torch.tensor(CLIP_STD, device=self.device).view(1, 3, 1, 1)

    def image_features(self, images: torch.Tensor) -> torch.Tensor:
        x = (images.to(self.device, self.dtype) - self._mean) / self._std
        return self.model.encode_image(x)

    def embed_words(self, text: str) -> torch.Tensor:
        n = len(text.split())
        ids = self.tokenizer([text]).to(self.device)
        with torch.no_grad():
            emb = self.model.token_embedding(ids)[0]
        # position 0 is the start token
        return emb[1 : 1 + n].clone()

    def text_features(self, tokens: torch.Tensor, class_names: Sequence[str]) -> torch.Tensor:
        m = tokens.shape[0]
        placeholder = " ".join(["X"] * m)
        prompts = [f"{placeholder} {name.replace('_', ' ')}." for name in class_names]
        ids = self.tokenizer(prompts).to(self.device)
        with torch.no_grad():
            emb = self.model.token_embedding(ids)
        ctx = tokens.to(self.device, emb.dtype).unsqueeze(0).expand(len(prompts), -1, -1)
        x = torch.cat([emb[:, :1], ctx, emb[:, 1 + m :]], dim=1)
        x = x + self.model.positional_embedding
        x = self.model.transformer(x, attn_mask=self.model.attn_mask)
        x = self.model.ln_final(x)
        eot = ids.argmax(dim=-1)
        x = x[torch.arange(x.shape[0]), eot] @ self.model.text_projection
        return x


@register_backend("clip-rn50")
def clip_rn50(**kwargs) -> ClipBackend:
    return ClipBackend("clip-rn50", **kwargs)


@register_backend("clip-vit-b16")
def clip_vit_b16(**kwargs) -> ClipBackend:
    return ClipBackend("clip-vit-b16", **kwargs)
