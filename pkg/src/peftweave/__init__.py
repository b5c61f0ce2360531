"""Composable language and task representations on a frozen byte-level seq2seq backbone."""

from .data import TextToTextExample
from .model import ModelConfig, TinyTransformer
from .peft import AdapterSet, PeftAssembly, SoftPrompt, Variant, assemble
from .tokenizer import ByteTokenizer, Vocab

__all__ = [
    "AdapterSet",
    "ByteTokenizer",
    "ModelConfig",
    "PeftAssembly",
    "SoftPrompt",
    "TextToTextExample",
    "TinyTransformer",
    "Variant",
    "Vocab",
    "assemble",
]
__version__ = "0.1.0"
