"""Test suite for the ISP matching engine."""
