"""SETR-style sequence-to-sequence semantic segmentation in numpy."""
