"""Capture DeiT intermediate token features and head-averaged attention.

X is the input to the chosen layer's multi-head self-attention module (the
hidden states after that layer's pre-attention layer norm), captured with a
forward pre-hook; the attention matrix is that layer's post-softmax attention
averaged over heads. Token order is CLS, DIST, then the patch tokens, matching
the SNFX aux-row convention.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch
from torchvision import datasets, transforms
from transformers import DeiTConfig, DeiTModel

from . import snfx

log = logging.getLogger("snfx_exporter")

VARIANTS = {
    "tiny": dict(hidden_size=192, num_attention_heads=3, intermediate_size=768),
    "small": dict(hidden_size=384, num_attention_heads=6, intermediate_size=1536),
    "base": dict(hidden_size=768, num_attention_heads=12, intermediate_size=3072),
}

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
PATCH = 16


@dataclass
class ExportConfig:
    model: str = "tiny"
    layer_index: int = 9
    data_root: str = ""
    image_size: int = 224
    out: str = "features.snfx"
    batch_size: int = 64
    device: str = "cpu"
    checkpoint: str | None = None
    seed: int = 0
    limit: int | None = None

    def __post_init__(self):
        if self.model not in VARIANTS:
            raise ValueError(f"unknown model variant {self.model!r}; pick one of {sorted(VARIANTS)}")
        if self.image_size % PATCH != 0:
            raise ValueError(f"image_size must be a multiple of {PATCH}")

    @property
    def grid(self) -> int:
        return self.image_size // PATCH

    @property
    def n_tokens(self) -> int:
        return self.grid * self.grid


def build_model(config: ExportConfig) -> DeiTModel:
    """DeiT of the requested variant; pretrained when a local checkpoint is
    given, otherwise randomly initialized from the seed (shape-conformance
    runs only)."""
    deit_cfg = DeiTConfig(
        image_size=config.image_size,
        patch_size=PATCH,
        attn_implementation="eager",
        **VARIANTS[config.model],
    )
    if config.layer_index >= deit_cfg.num_hidden_layers:
        raise ValueError(
            f"layer_index {config.layer_index} outside model depth {deit_cfg.num_hidden_layers}"
        )
    torch.manual_seed(config.seed)
    model = DeiTModel(deit_cfg, add_pooling_layer=False)
    if config.checkpoint:
        state = torch.load(config.checkpoint, map_location="cpu", weights_only=True)
        model.load_state_dict(state)
        log.info("loaded checkpoint %s", config.checkpoint)
    else:
        log.warning("no checkpoint given: exporting from a randomly initialized %s model", config.model)
    model.to(config.device)
    model.eval()
    return model


def preprocessing(image_size: int) -> transforms.Compose:
    return transforms.Compose(
        [
            transforms.Resize((image_size, image_size)),
            transforms.ToTensor(),
            transforms.Normalize(IMAGENET_MEAN, IMAGENET_STD),
        ]
    )


def header_for(config: ExportConfig, record_count: int) -> snfx.Header:
    return snfx.Header(
        n=config.n_tokens,
        zeta=2,
        d=VARIANTS[config.model]["hidden_size"],
        grid_h=config.grid,
        grid_w=config.grid,
        layer_index=config.layer_index,
        record_count=record_count,
    )


def _capture_batches(model: DeiTModel, loader, config: ExportConfig):
    """Yield (X, attn_bar, labels) numpy float32 batches from hooked forwards."""
    captured: dict[str, torch.Tensor] = {}

    def pre_hook(module, args):
        captured["x"] = args[0].detach()

    handle = model.layers[config.layer_index].attention.register_forward_pre_hook(pre_hook)
    try:
        with torch.no_grad():
            for pixels, labels in loader:
                captured.clear()
                out = model(pixel_values=pixels.to(config.device), output_attentions=True)
                if "x" not in captured:
                    raise RuntimeError(f"attention hook on layer {config.layer_index} captured nothing")
                attn_bar = out.attentions[config.layer_index].mean(dim=1)
                yield (
                    captured["x"].cpu().numpy().astype(np.float32),
                    attn_bar.cpu().numpy().astype(np.float32),
                    labels.numpy(),
                )
    finally:
        handle.remove()


def export(config: ExportConfig) -> snfx.Header:
    """Run the dataset through the backbone and write one SNFX file."""
    dataset = datasets.ImageFolder(config.data_root, transform=preprocessing(config.image_size))
    indices = range(len(dataset)) if config.limit is None else range(min(config.limit, len(dataset)))
    subset = torch.utils.data.Subset(dataset, list(indices))
    loader = torch.utils.data.DataLoader(
        subset, batch_size=config.batch_size, shuffle=False, num_workers=0
    )
    model = build_model(config)
    header = header_for(config, record_count=len(subset))
    expected = (header.tokens, header.d)

    def records():
        image_id = 0
        for x, attn, labels in _capture_batches(model, loader, config):
            if x.shape[1:] != expected:
                raise snfx.SnfxError(
                    f"captured shape {x.shape[1:]} does not match header {expected}; aborting"
                )
            for i in range(x.shape[0]):
                yield snfx.Record(image_id=image_id, label=int(labels[i]), X=x[i], attn=attn[i])
                image_id += 1

    snfx.write(config.out, header, records())
    log.info("wrote %d records to %s", header.record_count, config.out)
    return header
