from .records import (
    ANGLE_RANGE,
    EVENTS,
    FPS,
    FRAME_MS,
    MANEUVERS,
    N_FOLDERS,
    N_SEG_CLASSES,
    N_SEMANTIC,
    SEMANTIC_FIELDS,
    SPEED_RANGE,
    SPEED_ZONES,
    SPLITS,
    ZONE_VOCABULARY,
    Chapter,
    ChapterEntry,
    DatasetError,
    DatasetManifest,
    FrameRecord,
    IntegrityError,
    SemanticRecord,
    maneuver_tag,
    speed_zone_tag,
)
from .storage import (
    PAPER_SPLIT,
    GenConfig,
    generate_synthetic,
    largest_remainder,
    load_chapter,
    load_manifest,
    load_sequence,
    split_chapters,
    write_manifest,
)
