"""BatchNorm-free fully-integer quantized networks via progressive tandem
distillation: train a BN-enabled quantized teacher, distill it layer by layer
into a BN-free student with fixed integer scale factors, and run the result
with integer arithmetic only."""

__version__ = "0.1.0"
