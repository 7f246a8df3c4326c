"""
CLI BTXForge.

Point d'entrée pour la ligne de commande.
"""

from btxforge.main import main

if __name__ == "__main__":
    main()
