"""Tests for the poison frog lab."""
