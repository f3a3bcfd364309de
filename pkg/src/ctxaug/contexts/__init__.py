from .pipeline import (
    PLACEHOLDER,
    ContextTemplate,
    gen_all_regression_contexts,
    gen_regression_contexts,
    gen_two_sample_contexts,
)
from .profiles import PromptProfile, get_profile, load_profiles
from .variants import (
    PredictorVariant,
    function_words,
    informative_variant,
    jabberwocky_variant,
    mask_variant,
    preserves_function_words,
    shuffle_variant,
)

__all__ = [
    "PLACEHOLDER",
    "ContextTemplate",
    "PredictorVariant",
    "PromptProfile",
    "function_words",
    "gen_all_regression_contexts",
    "gen_regression_contexts",
    "gen_two_sample_contexts",
    "get_profile",
    "informative_variant",
    "jabberwocky_variant",
    "load_profiles",
    "mask_variant",
    "preserves_function_words",
    "shuffle_variant",
]
