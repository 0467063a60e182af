"""Test suite for UniControl-Desk."""
