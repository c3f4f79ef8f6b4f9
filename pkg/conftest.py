import os

import django

os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'nligen_project.settings')
django.setup()
