"""Tests for the PE evasion testbed."""
