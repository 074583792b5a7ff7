from .dataset import (
    SPLITS,
    SliceSample,
    SliceSet,
    batch_iterator,
    build_slice_set,
    cap_slices,
    check_disjoint,
    epoch_order,
    load_split,
    preprocess_subject,
    save_split,
    split_subjects,
)
from .phantom import ModalityTransform, PhantomConfig, expected_target, make_phantom_dataset
from .preprocess import (
    binarize_tumor,
    brain_pixel_count,
    encode_modality_label,
    filter_slices,
    resize_slice,
    scale_intensity,
)
from .volumes import (
    ALL_MODALITIES,
    LABEL_MAPPING,
    SOURCE,
    TARGETS,
    Modality,
    Volume,
    list_subjects,
    load_subject,
    read_raw,
    save_subject,
    write_raw,
)

__all__ = [
    "SPLITS",
    "SliceSample",
    "SliceSet",
    "batch_iterator",
    "build_slice_set",
    "cap_slices",
    "check_disjoint",
    "epoch_order",
    "load_split",
    "preprocess_subject",
    "save_split",
    "split_subjects",
    "ModalityTransform",
    "PhantomConfig",
    "expected_target",
    "make_phantom_dataset",
    "binarize_tumor",
    "brain_pixel_count",
    "encode_modality_label",
    "filter_slices",
    "resize_slice",
    "scale_intensity",
    "ALL_MODALITIES",
    "LABEL_MAPPING",
    "SOURCE",
    "TARGETS",
    "Modality",
    "Volume",
    "list_subjects",
    "load_subject",
    "read_raw",
    "save_subject",
    "write_raw",
]
