""" Constants, lists and definitions for the flowpatch lab
    Warning: ALLCAPS SPOKEN HERE

    Contains several sets of definitions, grouped under headings:
    1) File formats
    2) Raster conventions
    3) Defense defaults
    4) Flow estimator defaults
    5) Attack defaults
    6) Harness defaults and name tables
    7) Exceptions
"""

#
# 1) File formats
#

# Middlebury .flo
FLO_MAGIC = 202021.25
FLO_HEADER = '<fii'     # magic, width, height (little endian)
FLO_HEADER_SIZE = 12

# Binary PPM
PPM_MAGIC = b'P6'
PPM_MAXVAL = 255


#
# 2) Raster conventions
#

# Rec.601 luma weights for grayscale conversion
LUMA_WEIGHTS = (0.299, 0.587, 0.114)

# Horn-Schunck and image stencils see 0..255 intensities
INTENSITY_SCALE = 255.0

# Below this norm a flow vector counts as zero (ACS guard)
ZERO_FLOW_EPS = 1e-9


#
# 3) Defense defaults - the final hyperparameters of the study
#

DEF_NONE = 'none'
DEF_LGS = 'lgs'
DEF_ILP = 'ilp'

DEFENSE_KINDS = (DEF_NONE, DEF_LGS, DEF_ILP)

BLOCK_SIZE = 16         # K
BLOCK_OVERLAP = 8       # O
BLOCK_THRESH = 0.15     # t, compared against the block mean of G-bar
B_LGS = 15.0            # LGS smoothing factor
S_ILP = 15.0            # ILP candidate rescaling
T_ILP = 0.5             # ILP candidate threshold
R_TELEA = 5             # Telea inpainting radius

GRAD_FIRST = 'first'    # ||grad I||, LGS
GRAD_SECOND = 'second'  # |laplace I|, ILP

# Stage gradient kinds
GRAD_EXACT = 'exact'
GRAD_BPDA = 'bpda-surrogate'

# Fast marching pixel states
FMM_KNOWN = 0
FMM_BAND = 1
FMM_INSIDE = 2
FMM_INF = 1.0e6


#
# 4) Flow estimator defaults
#

HS_ALPHA = 15.0
HS_ITERS = 200


#
# 5) Attack defaults
#

AWARE_VANILLA = 'vanilla'
AWARE_LGS = 'lgs'
AWARE_ILP = 'ilp'
ATTACK_MANUAL = 'manual'
ATTACK_NONE = 'none'

AWARENESS_KINDS = (AWARE_VANILLA, AWARE_LGS, AWARE_ILP)

OPT_IFGSM = 'ifgsm'
OPT_SGD = 'sgd'

BOX_CLIP = 'clip'
BOX_COV = 'cov'

PATCH_SIDE_FULL = 100      # full-scale training protocol
PATCH_SIDE = 24
TRAIN_STEPS_FULL = 2500
TRAIN_STEPS = 300
ALPHA_PENALTY = 1e-8

ROT_RANGE = (-10.0, 10.0)       # degrees
SCALE_RANGE = (0.95, 1.05)

# tanh(15) < 1 in double precision, keeps CoV values inside (0,1)
COV_W_MAX = 15.0

# Awareness -> defense the patch is trained through
AWARE_DEFENSE = {
    AWARE_VANILLA: DEF_NONE,
    AWARE_LGS: DEF_LGS,
    AWARE_ILP: DEF_ILP,
}

# Awareness -> patch penalty order
AWARE_PENALTY = {
    AWARE_VANILLA: None,
    AWARE_LGS: GRAD_FIRST,
    AWARE_ILP: GRAD_SECOND,
}


#
# 6) Harness defaults and name tables
#

FRAME_HEIGHT = 64
FRAME_WIDTH = 128
SEEDS = (0, 1)
WORKERS_ENV = 'FLOWPATCH_WORKERS'

# Learning rate grid per optimizer
LR_GRID = {
    OPT_IFGSM: (1.0, 0.1, 0.01),
    OPT_SGD: (10.0, 100.0),
}

# Grid cells that did not produce numbers
CELL_DIVERGED = 'div'
CELL_FAILED = 'fail'

RECORD_FIELDS = ('frame', 'defense', 'attack', 'quality_epe',
                 'robustness_epe', 'attacked_quality_epe', 'config_hash')

# Human names for tables and scatter labels
DEFENSE_NAME = {
    DEF_NONE: "None",
    DEF_LGS: "LGS",
    DEF_ILP: "ILP",
}

ATTACK_NAME = {
    ATTACK_NONE: "None",
    AWARE_VANILLA: "Van",
    AWARE_LGS: "LGS",
    AWARE_ILP: "ILP",
    ATTACK_MANUAL: "Man",
}


#
# 7) Exceptions
#

class FormatError(ValueError):
    """ File does not follow the expected layout """


class ShapeError(ValueError):
    """ Raster shapes do not agree """


class ConfigError(ValueError):
    """ Configuration value out of its valid range """


class PlacementError(ValueError):
    """ Patch footprint leaves the image """


class DivergenceError(ArithmeticError):
    """ Training loss stopped being finite """
