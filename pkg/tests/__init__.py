"""Tests for conformal-survival"""
