from qdavpr.serial.core import (
    CheckpointRecord,
    load_checkpoint,
    read_descriptors,
    read_features,
    read_recall_values,
    save_checkpoint,
    strip_adversarial,
    write_descriptors,
    write_features,
    write_recall_report,
)
