"""Few-shot stressor span tagging under time shift, at desk scale.

A linear-chain CRF tagger over learned recurrent representations, trained
episodically with a first-order bilevel loop and adapted to the newest time
period with temperature-distillation anchoring so that a handful of labeled
posts does not erase what earlier periods taught the model.
"""

__version__ = "0.1.0"
