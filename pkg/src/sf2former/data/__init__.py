"""Volume ingestion, slice selection, augmentation, manifests, fold planning and phantoms."""

from .augment import augment, hflip, rotate
from .folds import Fold, FoldPlan, FoldPlanError, check_plan, make_folds
from .io import VolumeFormatError, load_volume, read_nifti, read_rvol, write_rvol
from .manifest import ManifestError, ManifestRow, read_manifest, write_manifest
from .phantom import Phantom, gen_phantom, render_volume
from .volume import SliceSet, Volume, normalize_slice, resize_bilinear, select_slices

__all__ = [
    "Fold", "FoldPlan", "FoldPlanError", "ManifestError", "ManifestRow", "Phantom", "SliceSet", "Volume",
    "VolumeFormatError", "augment", "check_plan", "gen_phantom", "hflip", "load_volume", "make_folds",
    "normalize_slice", "read_manifest", "read_nifti", "read_rvol", "render_volume", "resize_bilinear",
    "rotate", "select_slices", "write_manifest", "write_rvol",
]
