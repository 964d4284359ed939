"""Tissue class ids shared across the toolkit."""

BACKGROUND = 0
TUMOR = 1
TISSUE = 2
NECROSIS = 3
EXCLUDE = 255  # ignored by the loss and by all metrics

NUM_CLASSES = 4
CLASS_NAMES = ("background", "tumor", "tissue", "necrosis")
VALID_LABELS = frozenset({BACKGROUND, TUMOR, TISSUE, NECROSIS, EXCLUDE})
