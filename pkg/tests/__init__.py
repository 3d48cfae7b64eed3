"""Tests for pathguide-lab."""
