"""
Command Handlers Registration

Commands:
- train        - train a model from a packed corpus
- eval         - held-out bound, BPC and perplexity of a checkpoint
- sample       - unconditional samples from a checkpoint
- guide        - samples steered by span / lexical token guidance
- scaling-fit  - IsoFLOP fits and compute-optimal power laws
- tokenize     - build the vocabulary and packed datasets
"""


def get_handlers():
    """Map each subcommand name to its handler"""

    from .train import run_train
    from .evaluate import run_eval
    from .sample import run_guide, run_sample
    from .scaling_fit import run_scaling_fit
    from .tokenize import run_tokenize

    return {
        'train': run_train,
        'eval': run_eval,
        'sample': run_sample,
        'guide': run_guide,
        'scaling-fit': run_scaling_fit,
        'tokenize': run_tokenize,
    }
