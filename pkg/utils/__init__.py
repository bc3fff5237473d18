"""File I/O and synthetic task generation"""
