"""Convex discriminative multitask clustering."""
