"""Vision-tactile-language pipeline at desk scale.

Subpackages follow the pipeline stages: ``tensor`` (autodiff core),
``encoders`` / ``qformer`` / ``decoder`` (model), ``objectives`` (losses),
``datagen`` (synthetic corpus), ``evalsuite`` (metrics), ``trainer`` and
``cli`` (orchestration).
"""

__version__ = "0.1.0"
