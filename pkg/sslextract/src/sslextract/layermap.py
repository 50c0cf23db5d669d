"""Which pretrained layers carry which teacher role.

All layer indices are 1-based: phoneme_layer=11 means the 11th
transformer layer. The mel proxy counts convolutional encoder layers
instead, and 7 is the last conv layer in every base-size model here.
"""
from __future__ import annotations

from dataclasses import dataclass

MODEL_NAMES = ("hubert", "wav2vec2", "wavlm")
ROLES = ("phoneme", "word", "mel")

# base-size geometry these defaults were chosen for
BASE_NUM_LAYERS = 12
BASE_HIDDEN = 768
CONV_LAYERS = 7


@dataclass(frozen=True)
class LayerMap:
    """Layer choice per teacher role for one model family."""

    model_name: str
    phoneme_layer: int
    word_layer: int
    mel_proxy_layer: int = CONV_LAYERS

    def __post_init__(self):
        if self.model_name not in MODEL_NAMES:
            raise ValueError(f"unknown model {self.model_name!r}; "
                             f"expected one of {MODEL_NAMES}")
        for role in ROLES:
            if self.layer_for(role) < 1:
                raise ValueError(f"{role} layer must be >= 1 (1-based indexing)")

    def layer_for(self, role: str) -> int:
        if role == "phoneme":
            return self.phoneme_layer
        if role == "word":
            return self.word_layer
        if role == "mel":
            return self.mel_proxy_layer
        raise ValueError(f"unknown role {role!r}; expected one of {ROLES}")


DEFAULTS = {
    "hubert": LayerMap("hubert", phoneme_layer=11, word_layer=9),
    "wavlm": LayerMap("wavlm", phoneme_layer=11, word_layer=9),
    "wav2vec2": LayerMap("wav2vec2", phoneme_layer=6, word_layer=8),
}
