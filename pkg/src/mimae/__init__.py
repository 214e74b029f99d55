"""Masked-autoencoder pretraining with mutual-information objectives."""
