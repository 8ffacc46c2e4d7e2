"""Generative-prior HTTP service with deterministic mock backends."""
