"""Semantic class palette for occupancy grids.

The default palette is the common 17-class driving taxonomy; the reserved
FREE label always equals the semantic class count, so ``FREE == 17`` here.
Colors are the conventional per-class display colors used for BEV renders.
"""

CLASS_NAMES = [
    "others",
    "barrier",
    "bicycle",
    "bus",
    "car",
    "const. veh.",
    "motorcycle",
    "pedestrian",
    "traffic cone",
    "trailer",
    "truck",
    "drive. suf.",
    "other flat",
    "sidewalk",
    "terrain",
    "manmade",
    "vegetation",
]

NUM_CLASSES = len(CLASS_NAMES)  # semantic classes; FREE is NUM_CLASSES
FREE = NUM_CLASSES

# RGB in 0..255, indexed by class id.
CLASS_COLORS = [
    (0, 0, 0),        # others
    (112, 128, 144),  # barrier
    (220, 20, 60),    # bicycle
    (255, 127, 80),   # bus
    (255, 158, 0),    # car
    (233, 150, 70),   # const. veh.
    (255, 61, 99),    # motorcycle
    (0, 0, 230),      # pedestrian
    (47, 79, 79),     # traffic cone
    (255, 140, 0),    # trailer
    (255, 99, 71),    # truck
    (0, 207, 191),    # drive. suf.
    (175, 0, 75),     # other flat
    (75, 0, 75),      # sidewalk
    (112, 180, 60),   # terrain
    (222, 184, 135),  # manmade
    (0, 75, 0),       # vegetation
]

FREE_COLOR = (255, 255, 255)

# Named ids used by the synthetic world generator.
BARRIER = 1
BUS = 3
CAR = 4
TRUCK = 10
DRIVABLE = 11
MANMADE = 15
VEGETATION = 16


def class_color(label: int) -> tuple:
    """Display color for a class id; FREE (and anything past it) is white."""
    if 0 <= label < NUM_CLASSES:
        return CLASS_COLORS[label]
    return FREE_COLOR
