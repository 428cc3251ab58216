"""Serialized schemas for options, models and reports"""
