from .validation import check_image, check_raster, check_positive, load_image

__all__ = ["check_image", "check_raster", "check_positive", "load_image"]
