"""Infusion training of denoising Markov-chain transition operators."""
