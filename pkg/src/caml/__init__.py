"""Per-label attentional CNN (CAML / DR-CAML) for multi-label text classification."""

__version__ = "0.1.0"
