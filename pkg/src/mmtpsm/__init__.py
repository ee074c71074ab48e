"""Mean teacher semi-supervised instance segmentation of synthetic cells."""
