"""Tests for the fpvt package."""
