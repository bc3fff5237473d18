"""Core numerics: tabular models, the distillation MDP, PCL, budgets and decoding"""
