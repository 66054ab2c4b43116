"""File formats, synthetic phantom data, and augmentation."""
