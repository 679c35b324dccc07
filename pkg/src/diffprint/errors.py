class DimensionError(ValueError):
    """Latent, key, anchor, record or model dimensions disagree."""
