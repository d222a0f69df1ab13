"""
Module defining constants used throughout the toolkit.

Constants
---------
DEFAULT_TEMPLATE : str
    The five-slot attribute prompt.

DEFAULT_ATTRIBUTES : tuple
    Attribute names for the slots of DEFAULT_TEMPLATE, in slot order.

DEFAULT_EPSILON : float
    Per-pixel L-infinity bound of the perturbation.

DEFAULT_LEARNING_RATE : float
    Adam learning rate of both training stages.

DEFAULT_TAU : float
    Temperature of the contrastive losses.

DEFAULT_MARGIN : float
    Margin of the triplet attack losses.

CHECKPOINT_FORMAT_VERSION : int
    Version written into, and required from, every checkpoint manifest.
"""
DEFAULT_TEMPLATE = (
    "A photo of a person wearing <S1> on top, <S2> underneath, "
    "<S3> hairstyle, <S4> shoes, carrying <S5>."
)
DEFAULT_ATTRIBUTES = ("top", "underneath", "hairstyle", "shoes", "carrying")

DEFAULT_EPSILON = 8 / 255
DEFAULT_LEARNING_RATE = 2e-4
DEFAULT_TAU = 0.07
DEFAULT_MARGIN = 0.3

CHECKPOINT_FORMAT_VERSION = 1
