"""
URL configuration for rmsl project.

Only the admin is mounted; it is used to browse the run registry.
"""
from django.contrib import admin
from django.urls import path

urlpatterns = [
    path('admin/', admin.site.urls),
]
