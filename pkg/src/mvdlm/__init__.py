"""Matrix-variate dynamic linear models for voxel-wise fMRI activation mapping."""
from .design import (DesignMatrix, HrfParams, StimulusSpec, build_design, canonical_hrf,
                     expected_bold, load_design, load_stimulus, save_design)
from .dlm import (ModelConfig, PosteriorBatch, PosteriorSequence, PosteriorState, filter_batch,
                  filter_gains, filter_step, run_filter, sample_inverse_wishart,
                  sample_matrix_normal)
from .errors import (ConfigurationError, DataError, DegenerateForecastError, FormatError,
                     IntegrityError, MetadataError, MVDLMError, NumericalError, ParameterError,
                     UnsupportedCombinationError)
from .group import GroupDistribution, GroupVoxel, group_combine, group_contrast, map_group
from .mapping import EvidenceVolume, map_subject
from .simulate import (PhantomSpec, Region, assess_fpr, dice, fictitious_designs,
                       generate_phantom, generate_resting)
from .summary import SubjectSummary, load_summary, save_summary
from .trajectories import (EffectKind, contrast_evidence, effect_projection, evidence,
                           fest_draw, ffbs_draw, fsts_draw, sample_trajectories)
from .volume import Bold4D, build_mask, extract_series, neighborhood, read_volume, write_volume

__version__ = "0.1.0"
