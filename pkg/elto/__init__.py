# elto : opérateurs de transfert latents plongés
__version__ = "0.1.0"
