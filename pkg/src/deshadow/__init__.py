"""Shadow removal via luminance/color decoupling.

The package splits shadow-affected images into a luminance plane and two
chroma planes, restores each with a dedicated network, and recombines the
results.  It ships a physically-motivated synthetic data generator, a mask
refinement model, training loops, an evaluation harness, and a CLI
(``deshadow <subcommand>``).
"""

__version__ = "0.1.0"
